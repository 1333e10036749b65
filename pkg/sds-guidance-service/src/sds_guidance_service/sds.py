"""Score-distillation pixel gradients with classifier-free guidance.

The image is noised at a sampled timestep fraction, a noise predictor is
queried with and without the prompt, the two predictions are combined with
the guidance scale, and the gradient w(t) * (eps_hat - eps) is returned in
pixel space. The timestep weighting w(t) is configurable ("constant" or
"snr" = sqrt(1 - alpha_bar)) because the literature leaves it open.
"""

from __future__ import annotations

import hashlib
import importlib
import math
import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np

WEIGHTINGS = ("constant", "snr")


class NoisePredictor(Protocol):
    """Anything that predicts the injected noise from a noised image.

    prompt is None for the unconditional branch.
    """

    def predict(self, noisy: np.ndarray, t_fraction: float,
                prompt: str | None) -> np.ndarray: ...


def alpha_bar(t_fraction: float) -> float:
    """Cosine signal-retention schedule: 1 at t=0, 0 at t=1."""
    if not 0.0 <= t_fraction <= 1.0:
        raise ValueError("t_fraction must lie in [0, 1]")
    return math.cos(0.5 * math.pi * t_fraction) ** 2


def timestep_weight(t_fraction: float, weighting: str) -> float:
    if weighting == "constant":
        return 1.0
    if weighting == "snr":
        return math.sqrt(1.0 - alpha_bar(t_fraction))
    raise ValueError(f"weighting must be one of {WEIGHTINGS}")


def sds_gradient(image: np.ndarray, prompt: str, t_fraction: float,
                 guidance_scale: float, predictor: NoisePredictor,
                 rng: np.random.Generator,
                 weighting: str = "constant") -> np.ndarray:
    """One score-distillation gradient; shape always equals image shape."""
    image = np.asarray(image, dtype=np.float64)
    a = alpha_bar(t_fraction)
    eps = rng.standard_normal(image.shape)
    noisy = math.sqrt(a) * image + math.sqrt(1.0 - a) * eps
    eps_cond = np.asarray(predictor.predict(noisy, t_fraction, prompt),
                          dtype=np.float64)
    eps_uncond = np.asarray(predictor.predict(noisy, t_fraction, None),
                            dtype=np.float64)
    if eps_cond.shape != image.shape or eps_uncond.shape != image.shape:
        raise ValueError("noise predictor changed the array shape")
    eps_hat = eps_uncond + guidance_scale * (eps_cond - eps_uncond)
    return timestep_weight(t_fraction, weighting) * (eps_hat - eps)


def request_seed(master_seed: int, prompt: str, stage: int, noise_lo: float,
                 noise_hi: float, pixel_bytes: bytes) -> int:
    """Content-derived seed: identical requests get identical gradients."""
    h = hashlib.blake2b(key=struct.pack("<Q", master_seed & (2**64 - 1)),
                        digest_size=8)
    h.update(prompt.encode("utf-8"))
    h.update(struct.pack("<i", stage))
    h.update(struct.pack("<dd", noise_lo, noise_hi))
    h.update(pixel_bytes)
    return struct.unpack("<Q", h.digest())[0]


class AnalyticPredictor:
    """Closed-form stand-in predictor for tests and offline runs.

    Deterministic, smooth, and prompt-sensitive: the conditional branch
    scales a bounded function of the noised image by a per-prompt constant,
    so classifier-free combination has something to amplify.
    """

    def predict(self, noisy: np.ndarray, t_fraction: float,
                prompt: str | None) -> np.ndarray:
        scale = 1.0 if prompt is None else self._prompt_scale(prompt)
        return np.tanh(noisy) * scale * (1.0 - 0.5 * t_fraction)

    @staticmethod
    def _prompt_scale(prompt: str) -> float:
        digest = hashlib.blake2b(prompt.encode("utf-8"),
                                 digest_size=4).digest()
        return 1.0 + struct.unpack("<I", digest)[0] / 2**32


def analytic_predictor_factory(device: str = "cpu") -> AnalyticPredictor:
    return AnalyticPredictor()


def load_predictor(model: str, device: str = "cpu") -> NoisePredictor:
    """Resolve "module.path:factory" into a predictor instance.

    The factory is called with the device string and must return an object
    with the NoisePredictor interface. This keeps heavyweight diffusion
    backends out of the package while making them one flag away.
    """
    if ":" not in model:
        raise ValueError(
            f"model {model!r} is not of the form 'module.path:factory'")
    module_name, _, attr = model.partition(":")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise ValueError(f"cannot import model backend {module_name!r}: {exc}")
    try:
        factory = getattr(module, attr)
    except AttributeError:
        raise ValueError(f"module {module_name!r} has no attribute {attr!r}")
    return factory(device)


@dataclass
class ServiceConfig:
    """Listen mode, backend, and guidance parameters for one server."""

    port: int | None = None     # TCP listen port; None with stdio=True
    stdio: bool = False
    mock: bool = False          # answer every guide with a zero gradient
    model: str | None = None    # "module.path:factory" backend spec
    device: str = "cpu"
    guidance_scale: float = 20.0
    stage1_range: tuple[float, float] = (0.2, 0.98)
    stage2_range: tuple[float, float] = (0.02, 0.5)
    weighting: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.stdio == (self.port is not None):
            raise ValueError("choose exactly one of --port and --stdio")
        if self.port is not None and not 0 <= self.port <= 65535:
            raise ValueError("port must be in [0, 65535]")
        for lo, hi in (self.stage1_range, self.stage2_range):
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(
                    "timestep ranges must satisfy 0 <= lo < hi <= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if not self.mock and self.model is None:
            raise ValueError("need --mock or a --model backend")

    def stage_range(self, stage: int) -> tuple[float, float]:
        return self.stage1_range if stage == 1 else self.stage2_range
