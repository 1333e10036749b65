"""Procedural compositional prompt corpus with rendered reference views.

Prompts come from a shapes x themes template grid ("<shape> <theme>", e.g.
"sphere painted red", "cube wearing a hat") with the grid diagonal held out
as unseen prompts. Each prompt owns analytic geometry: a superquadric body,
optionally unioned with an accessory primitive, plus a color field. Four
canonical views per prompt (front/side/back at low elevation, one overhead)
are rendered once, stored as PPM files next to a JSON manifest, and keyed by
the direction-suffixed prompt string so any sampled camera can be matched to
a reference by its directional sector.

The body field is the radial signed distance of a superquadric: with the
inside-outside function F scaled so the surface sits at F = 1, the scale
factor beta(p) = F(p)^(e1/2) is 1-homogeneous, so |p| - |p|/beta(p) measures
exact signed distance along the ray from the origin.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import formats, raster, tetmesh
from . import tensor as T
from .camera import orbit_camera
from .embedding import VIEW_SUFFIXES, directional_prompt

MANIFEST_NAME = "manifest.json"
BODY_COLOR = (0.72, 0.72, 0.72)


@dataclass(frozen=True)
class Superquadric:
    """Axis half-extents a,b,c and blockiness exponents e1 (vertical), e2
    (cross-section); e=1 round, e->0 boxy, e=2 pinched (octahedral)."""

    a: float
    b: float
    c: float
    e1: float
    e2: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def field(self, p: np.ndarray) -> np.ndarray:
        """Radial signed distance: negative inside, zero on the surface."""
        q = np.asarray(p, dtype=np.float64) - np.asarray(self.center)
        x = np.abs(q[..., 0]) / self.a
        y = np.abs(q[..., 1]) / self.b
        z = np.abs(q[..., 2]) / self.c
        inner = x ** (2.0 / self.e2) + y ** (2.0 / self.e2)
        F = inner ** (self.e2 / self.e1) + z ** (2.0 / self.e1)
        beta = F ** (self.e1 / 2.0)
        r = np.linalg.norm(q, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            sdf = r - np.where(beta > 0.0, r / beta, 0.0)
        return np.where(r < 1e-12, -min(self.a, self.b, self.c), sdf)


SHAPES: dict[str, Superquadric] = {
    "sphere": Superquadric(0.45, 0.45, 0.45, 1.0, 1.0),
    "cube": Superquadric(0.40, 0.40, 0.40, 0.3, 0.3),
    "cylinder": Superquadric(0.28, 0.28, 0.48, 0.3, 1.0),
    "diamond": Superquadric(0.48, 0.48, 0.48, 2.0, 2.0),
    "egg": Superquadric(0.30, 0.30, 0.46, 1.0, 1.0),
    "barrel": Superquadric(0.38, 0.38, 0.42, 0.6, 1.0),
    "puck": Superquadric(0.45, 0.45, 0.16, 0.3, 1.0),
    "block": Superquadric(0.46, 0.30, 0.20, 0.3, 0.3),
}

THEME_COLORS: dict[str, tuple[float, float, float]] = {
    "painted red": (0.85, 0.15, 0.15),
    "painted green": (0.15, 0.70, 0.20),
    "painted blue": (0.15, 0.30, 0.85),
    "painted yellow": (0.90, 0.85, 0.15),
    "painted white": (0.92, 0.92, 0.92),
}

# accessory factory: body spec -> (primitive, accessory color)
THEME_ACCESSORIES = {
    "wearing a hat": lambda body: (
        Superquadric(0.20, 0.20, 0.12, 0.5, 1.0, center=(0.0, 0.0, body.c)),
        (0.80, 0.20, 0.20)),
    "with a belt": lambda body: (
        Superquadric(body.a + 0.07, body.b + 0.07, 0.07, 0.35, 1.0),
        (0.12, 0.12, 0.12)),
    "on a pedestal": lambda body: (
        Superquadric(0.42, 0.42, 0.10, 0.35, 1.0,
                     center=(0.0, 0.0, -body.c - 0.04)),
        (0.55, 0.35, 0.20)),
}

THEMES: tuple[str, ...] = (
    "painted red", "painted green", "painted blue", "painted yellow",
    "wearing a hat", "with a belt", "on a pedestal", "painted white",
)

CANONICAL_VIEWS: tuple[tuple[str, float, float], ...] = (
    ("front", 0.0, 15.0),
    ("side", 90.0, 15.0),
    ("back", 180.0, 15.0),
    ("overhead", 0.0, 70.0),
)
CANONICAL_FOV = 50.0
CANONICAL_DISTANCE = 3.0


def make_prompt(shape: str, theme: str) -> str:
    return f"{shape} {theme}"


@dataclass
class PromptFields:
    """Analytic geometry of one prompt: signed distance and albedo fields."""

    sdf: callable    # (N, 3) -> (N,)
    color: callable  # (N, 3) -> (N, 3)


def prompt_fields(shape: str, theme: str) -> PromptFields:
    if shape not in SHAPES:
        raise KeyError(f"unknown shape {shape!r}")
    body = SHAPES[shape]
    parts = [(body, np.array(THEME_COLORS.get(theme, BODY_COLOR)))]
    if theme in THEME_ACCESSORIES:
        acc, acc_color = THEME_ACCESSORIES[theme](body)
        parts.append((acc, np.array(acc_color)))
    elif theme not in THEME_COLORS:
        raise KeyError(f"unknown theme {theme!r}")

    def sdf(p):
        return np.min([spec.field(p) for spec, _ in parts], axis=0)

    def color(p):
        values = np.stack([spec.field(p) for spec, _ in parts])
        pick = np.argmin(values, axis=0)
        palette = np.stack([c for _, c in parts])
        return palette[pick]

    return PromptFields(sdf=sdf, color=color)


def compositional_prompts(n_shapes: int = 4, n_themes: int = 4
                          ) -> tuple[list[str], list[str]]:
    """Template-grid prompt sets with the diagonal held out as unseen."""
    if not (2 <= n_shapes <= len(SHAPES) and 2 <= n_themes <= len(THEMES)):
        raise ValueError("grid dims must be >=2 and within the template table")
    shapes = list(SHAPES)[:n_shapes]
    themes = list(THEMES)[:n_themes]
    seen, unseen = [], []
    for i, shape in enumerate(shapes):
        for j, theme in enumerate(themes):
            prompt = make_prompt(shape, theme)
            (unseen if i % n_themes == j else seen).append(prompt)
    return seen, unseen


def _prompt_parts(prompt: str) -> tuple[str, str]:
    shape, _, theme = prompt.partition(" ")
    return shape, theme


def render_target_views(prompt: str, *, resolution: int = 128,
                        grid_res: int = 64, bound: float = 1.0,
                        views=CANONICAL_VIEWS) -> dict[str, np.ndarray]:
    """Render the prompt's analytic fields from each canonical view.

    Returns {direction-suffixed prompt: (resolution, resolution, 3) image}.
    """
    shape, theme = _prompt_parts(prompt)
    fields = prompt_fields(shape, theme)
    grid = tetmesh.build_grid(grid_res, bound)
    with T.no_grad():
        grid.sdf = T.as_tensor(fields.sdf(grid.vertices))
        grid.color = T.as_tensor(np.clip(fields.color(grid.vertices), 0, 1))
        mesh = tetmesh.march_tets(grid)
        out = {}
        for _, azimuth, elevation in views:
            cam = orbit_camera(azimuth, elevation, distance=CANONICAL_DISTANCE,
                               fov_y=CANONICAL_FOV,
                               width=resolution, height=resolution)
            frag = raster.rasterize(mesh.vertices.data, mesh.faces, cam)
            img = raster.shade_fragments(mesh, frag, cam, shading="albedo",
                                         background="white")
            key = directional_prompt(prompt, azimuth, elevation)
            out[key] = np.clip(img.data.astype(np.float64), 0.0, 1.0)
    return out


def coverage_audit(target_keys, prompts) -> dict[str, dict[str, int]]:
    """Verify every prompt has at least one target per directional sector."""
    keys = set(target_keys)
    report = {}
    for prompt in prompts:
        sectors = {}
        for suffix in VIEW_SUFFIXES:
            count = int(prompt + suffix in keys)
            if count == 0:
                raise ValueError(
                    f"prompt {prompt!r} has no target for sector {suffix!r}")
            sectors[suffix.lstrip(", ")] = count
        report[prompt] = sectors
    return report


def build_dataset(out_dir, *, n_shapes: int = 4, n_themes: int = 4,
                  resolution: int = 128, grid_res: int = 64,
                  bound: float = 1.0, seed: int = 0) -> dict:
    """Render and store the full target-view set plus its manifest."""
    os.makedirs(out_dir, exist_ok=True)
    seen, unseen = compositional_prompts(n_shapes, n_themes)
    prompts = seen + unseen
    view_files: dict[str, str] = {}
    for idx, prompt in enumerate(sorted(prompts)):
        targets = render_target_views(prompt, resolution=resolution,
                                      grid_res=grid_res, bound=bound)
        for (view_name, _, _), (key, img) in zip(CANONICAL_VIEWS,
                                                 targets.items()):
            fname = f"{idx:03d}_{view_name}.ppm"
            formats.write_image(img, os.path.join(out_dir, fname))
            view_files[key] = fname
    coverage_audit(view_files, prompts)
    manifest = {
        "format_version": 1,
        "seed": seed,
        "resolution": resolution,
        "grid_res": grid_res,
        "bound": bound,
        "n_shapes": n_shapes,
        "n_themes": n_themes,
        "seen": seen,
        "unseen": unseen,
        "views": view_files,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


@dataclass
class Dataset:
    seen: list[str]
    unseen: list[str]
    targets: dict[str, np.ndarray]  # suffixed prompt -> image
    manifest: dict

    @property
    def prompts(self) -> list[str]:
        return self.seen + self.unseen


def load_dataset(directory) -> Dataset:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    targets = {key: formats.read_image(os.path.join(directory, fname))
               for key, fname in manifest["views"].items()}
    data = Dataset(seen=list(manifest["seen"]), unseen=list(manifest["unseen"]),
                   targets=targets, manifest=manifest)
    coverage_audit(targets, data.prompts)
    return data
