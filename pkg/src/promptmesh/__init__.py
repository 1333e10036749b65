"""Amortized prompt-to-mesh pipeline: one generator network maps text prompts
to triplane neural fields, rendered volumetrically (stage 1) or as extracted
textured meshes (stage 2). Pure numpy, hand-rolled autodiff."""

__version__ = "0.1.0"
