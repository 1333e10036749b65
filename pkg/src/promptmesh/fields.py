"""Triplane-backed neural fields: SDF, color, and vertex deformation heads.

Every head consumes the concatenation of the bilinear triplane feature at a
point with the point's sinusoidal positional encoding, through its own
three-layer MLP (hidden width 64). The SDF head adds an analytic sphere bias
(|p| - r0) and starts with a zeroed last layer, so the initial geometry is
exactly a sphere of radius r0. The deformation head is tanh-bounded to half a
tetrahedral grid cell per coordinate, which keeps the marching grid valid.

Positions are treated as constants: no gradient flows into p itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class HeadConfig:
    triplane_channels: int = 16
    octaves: int = 6
    hidden: int = 64
    bound: float = 1.0
    sphere_radius: float = 0.5
    grid_res: int = 48  # sets the deformation bound (half a cell)
    seed: int = 1

    @property
    def half_cell(self) -> float:
        return self.bound / self.grid_res

    @property
    def input_dim(self) -> int:
        return self.triplane_channels + 3 + 6 * self.octaves


def posenc(p: np.ndarray, octaves: int) -> np.ndarray:
    """[p, sin(2^k pi p), cos(2^k pi p) for k < octaves], concatenated."""
    p = np.asarray(p)
    parts = [p]
    for k in range(octaves):
        ang = (2.0 ** k) * math.pi * p
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


def query_triplane(planes: T.Tensor, p: np.ndarray, bound: float = 1.0) -> T.Tensor:
    """Sum of bilinear samples of the three planes at a batch of points.

    p is (N, 3) in object space; coordinates are normalized by the bound and
    clamp at the plane borders. planes is (3, C, H, W) laid out XY/XZ/YZ.
    """
    q = np.asarray(p, dtype=planes.data.dtype) / bound
    xy = T.interp_bilinear(planes[0], T.Tensor(q[:, (0, 1)]))
    xz = T.interp_bilinear(planes[1], T.Tensor(q[:, (0, 2)]))
    yz = T.interp_bilinear(planes[2], T.Tensor(q[:, (1, 2)]))
    return xy + xz + yz


class FieldHeads:
    """The three field MLPs with their parameters."""

    def __init__(self, cfg: HeadConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d_in, hid = cfg.input_dim, cfg.hidden
        p: dict[str, T.Tensor] = {}

        def lim(fan):
            return 1.0 / math.sqrt(fan)

        for head, d_out in (("sdf", 1), ("deform", 3), ("color", 3)):
            p[f"{head}.w1"] = T.parameter(
                rng.uniform(-lim(d_in), lim(d_in), (d_in, hid)), name=f"{head}.w1")
            p[f"{head}.b1"] = T.parameter(np.zeros(hid), name=f"{head}.b1")
            p[f"{head}.w2"] = T.parameter(
                rng.uniform(-lim(hid), lim(hid), (hid, hid)), name=f"{head}.w2")
            p[f"{head}.b2"] = T.parameter(np.zeros(hid), name=f"{head}.b2")
            # zero-initialized last layer: sphere SDF, zero offsets, gray color
            p[f"{head}.w3"] = T.parameter(np.zeros((hid, d_out)), name=f"{head}.w3")
            p[f"{head}.b3"] = T.parameter(np.zeros(d_out), name=f"{head}.b3")
        self._params = p

    def parameters(self) -> dict[str, T.Tensor]:
        return self._params

    # -- shared input ------------------------------------------------------------

    def field_input(self, planes: T.Tensor, p: np.ndarray) -> T.Tensor:
        p = np.asarray(p, dtype=planes.data.dtype)
        feat = query_triplane(planes, p, self.cfg.bound)
        enc = T.Tensor(posenc(p, self.cfg.octaves))
        return T.concat([feat, enc], axis=1)

    def _mlp(self, head: str, x: T.Tensor) -> T.Tensor:
        p = self._params
        h = T.relu(x @ p[f"{head}.w1"] + p[f"{head}.b1"])
        h = T.relu(h @ p[f"{head}.w2"] + p[f"{head}.b2"])
        return h @ p[f"{head}.w3"] + p[f"{head}.b3"]

    # -- heads ---------------------------------------------------------------------

    def sdf(self, planes: T.Tensor, p: np.ndarray,
            inputs: T.Tensor | None = None) -> T.Tensor:
        """Signed distance (N, 1): raw MLP output plus the sphere bias."""
        x = self.field_input(planes, p) if inputs is None else inputs
        raw = self._mlp("sdf", x)
        radii = np.linalg.norm(np.asarray(p, dtype=np.float64), axis=1)
        bias = (radii - self.cfg.sphere_radius).astype(raw.data.dtype)
        return raw + T.Tensor(bias[:, None])

    def color(self, planes: T.Tensor, p: np.ndarray,
              inputs: T.Tensor | None = None) -> T.Tensor:
        """Albedo (N, 3) in [0, 1]."""
        x = self.field_input(planes, p) if inputs is None else inputs
        return T.sigmoid(self._mlp("color", x))

    def deform(self, planes: T.Tensor, p: np.ndarray,
               inputs: T.Tensor | None = None) -> T.Tensor:
        """Per-vertex offset (N, 3), |offset| <= half a grid cell per coordinate."""
        x = self.field_input(planes, p) if inputs is None else inputs
        return T.tanh(self._mlp("deform", x)) * self.cfg.half_cell
