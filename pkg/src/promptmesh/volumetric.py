"""Volumetric stage-1 renderer.

Opacity comes from the signed distance field through a learnable-sharpness
logistic: for consecutive samples with SDF values f_i, f_{i+1} along a ray,

    alpha_i = max((sigma_s(f_i) - sigma_s(f_{i+1})) / sigma_s(f_i), 0)

where sigma_s(x) = 1 / (1 + exp(-s * x)). Alpha is nonzero only where the
field decreases along the ray, i.e. when the ray is entering the surface.
Pixels composite front to back with transmittance T_i = prod_{j<i}(1 - a_j),
and leftover transmittance falls through to a solid background colour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .camera import Camera, make_rays, ray_aabb
from .fields import FieldHeads, HeadConfig
from .tensor import Tensor

BACKGROUNDS = {
    "white": np.array([1.0, 1.0, 1.0]),
    "black": np.array([0.0, 0.0, 0.0]),
    "gray": np.array([0.5, 0.5, 0.5]),
}

SHADING_MODES = ("albedo", "textureless", "diffuse")
AMBIENT = 0.1


@dataclass
class RaySampleBatch:
    """Detached per-ray diagnostics from one render (active rays only)."""

    t_values: np.ndarray      # (A, n) strictly increasing sample depths
    sdf: np.ndarray           # (A, n)
    colors: np.ndarray        # (A, n-1, 3) shaded sample colours
    alphas: np.ndarray        # (A, n-1) in [0, 1]
    transmittance: np.ndarray  # (A, n-1) nonincreasing, in [0, 1]
    weights: np.ndarray       # (A, n-1) = T * alpha, sums to <= 1 per ray
    active_index: np.ndarray  # (A,) flat pixel index of each active ray
    s: float


def alpha_from_sdf(sdf_front: Tensor, sdf_back: Tensor, s: Tensor) -> Tensor:
    """Per-interval opacity from consecutive SDF samples (front closer to eye)."""
    s_val = float(s.data if isinstance(s, Tensor) else s)
    if not np.isfinite(s_val) or s_val <= 0.0:
        raise ValueError("sharpness s must be finite and positive")
    if not (np.isfinite(sdf_front.data).all() and np.isfinite(sdf_back.data).all()):
        raise ValueError("non-finite SDF values in alpha_from_sdf")
    phi_front = T.sigmoid(sdf_front * s)
    phi_back = T.sigmoid(sdf_back * s)
    return T.maximum((phi_front - phi_back) / phi_front, T.as_tensor(0.0))


def composite(alphas: Tensor, colors: Tensor, background: np.ndarray) -> tuple[Tensor, Tensor]:
    """Front-to-back compositing over the trailing sample axis.

    alphas: (R, S) in [0, 1]; colors: (R, S, 3); background: (3,).
    Returns (rgb (R, 3), opacity (R,)). The factor 1 - alpha is floored at
    a tiny positive value inside the cumulative product so the backward
    pass never divides by zero; fully opaque samples still composite to
    their own colour exactly.
    """
    r, sn = alphas.shape
    trans = T.exclusive_cumprod(T.maximum(1.0 - alphas, T.as_tensor(1e-7)))
    weights = trans * alphas
    opacity = T.tsum(weights, axis=1)
    wf = T.reshape(weights, (r, sn, 1))
    rgb = T.tsum(T.bcast_to(wf, (r, sn, 3)) * colors, axis=1)
    bg = T.as_tensor(np.asarray(background, dtype=T.default_dtype()))
    leftover = T.bcast_to(T.reshape(1.0 - opacity, (r, 1)), (r, 3))
    rgb = rgb + leftover * T.bcast_to(T.reshape(bg, (1, 3)), (r, 3))
    return rgb, opacity


def _finite_difference_normals(planes, heads: FieldHeads, pts: np.ndarray) -> Tensor:
    """Unit surface normals via central differences of the SDF (step 1% of bound)."""
    h = 0.01 * heads.cfg.bound
    grads = []
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = h
        f_plus = heads.sdf(planes, pts + offset)
        f_minus = heads.sdf(planes, pts - offset)
        grads.append((f_plus - f_minus) * (0.5 / h))
    g = T.concat(grads, axis=1)
    norm = T.sqrt(T.tsum(g * g, axis=1) + 1e-12)
    return g / T.bcast_to(T.reshape(norm, (-1, 1)), g.shape)


def shade(albedo: Tensor, normals: Tensor | None, shading: str,
          light_dir: np.ndarray | None) -> Tensor:
    """Apply a shading mode to per-point albedo.

    albedo: (N, 3); normals: (N, 3) unit vectors (required unless albedo
    mode); light_dir: unit vector pointing from the surface toward the
    light. Lambertian term with a fixed ambient floor keeps fully
    back-facing points visible.
    """
    if shading not in SHADING_MODES:
        raise ValueError(f"unknown shading mode {shading!r}")
    if shading == "albedo":
        return albedo
    if normals is None or light_dir is None:
        raise ValueError("normals and light_dir are required for lit shading")
    ld = np.asarray(light_dir, dtype=T.default_dtype())
    ld = ld / np.linalg.norm(ld)
    lam = T.maximum(T.tsum(normals * T.as_tensor(ld), axis=1), T.as_tensor(0.0))
    factor = T.bcast_to(T.reshape(AMBIENT + (1.0 - AMBIENT) * lam, (-1, 1)),
                        albedo.shape)
    if shading == "textureless":
        return factor
    return factor * albedo


def render_stage1(planes, heads: FieldHeads, s: Tensor, cam: Camera,
                  n_samples: int = 24, background: str | np.ndarray = "white",
                  shading: str = "albedo", light_dir: np.ndarray | None = None,
                  ) -> tuple[Tensor, Tensor, RaySampleBatch]:
    """Render one view by marching the implicit fields.

    Returns (image (H, W, 3), opacity (H, W), batch). Rays that miss the
    field's bounding cube composite to the background exactly and carry no
    gradient. The background may be a named preset or an RGB triple.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    bg = BACKGROUNDS[background] if isinstance(background, str) else np.asarray(background, float)
    origins, dirs = make_rays(cam)
    near, far = ray_aabb(origins, dirs, heads.cfg.bound)
    active = far > near
    hw = origins.shape[0]
    dt = T.default_dtype()

    if not active.any():
        img = T.bcast_to(T.as_tensor(bg.astype(dt).reshape(1, 1, 3)),
                         (cam.height, cam.width, 3))
        op = T.as_tensor(np.zeros((cam.height, cam.width), dtype=dt))
        empty = np.zeros((0, n_samples))
        batch = RaySampleBatch(empty, empty, np.zeros((0, n_samples - 1, 3)),
                               empty[:, :-1], empty[:, :-1], empty[:, :-1],
                               np.zeros(0, dtype=np.int64), float(s.data))
        return img, op, batch

    idx = np.nonzero(active)[0]
    a = idx.size
    frac = np.linspace(0.0, 1.0, n_samples)
    t_vals = near[idx, None] + (far - near)[idx, None] * frac[None, :]
    pts = origins[idx, None, :] + t_vals[..., None] * dirs[idx, None, :]
    pts_flat = pts.reshape(-1, 3)

    inputs = heads.field_input(planes, pts_flat)
    sdf = heads.sdf(planes, pts_flat, inputs=inputs)

    front_idx = (np.arange(a)[:, None] * n_samples
                 + np.arange(n_samples - 1)[None, :]).reshape(-1)
    inputs_front = T.gather_rows(inputs, front_idx)
    albedo = heads.color(planes, pts_flat[front_idx], inputs=inputs_front)
    if shading != "albedo":
        normals = _finite_difference_normals(planes, heads, pts_flat[front_idx])
    else:
        normals = None
    colors = shade(albedo, normals, shading, light_dir)

    sdf_rows = T.reshape(sdf, (a, n_samples))
    alphas = alpha_from_sdf(sdf_rows[:, :-1], sdf_rows[:, 1:], s)
    rgb, opacity = composite(alphas, T.reshape(colors, (a, n_samples - 1, 3)), bg)

    base_img = np.broadcast_to(bg.astype(dt), (hw, 3)).copy()
    img_flat = T.scatter_rows(base_img, idx, rgb)
    image = T.reshape(img_flat, (cam.height, cam.width, 3))
    op_flat = T.scatter_rows(np.zeros((hw, 1), dtype=dt), idx,
                             T.reshape(opacity, (a, 1)))
    opacity_img = T.reshape(op_flat, (cam.height, cam.width))

    with T.no_grad():
        trans = T.exclusive_cumprod(T.maximum(1.0 - alphas, T.as_tensor(1e-7)))
        batch = RaySampleBatch(
            t_values=t_vals,
            sdf=sdf_rows.data.reshape(a, n_samples).copy(),
            colors=colors.data.reshape(a, n_samples - 1, 3).copy(),
            alphas=alphas.data.copy(),
            transmittance=trans.data.copy(),
            weights=(trans.data * alphas.data).copy(),
            active_index=idx,
            s=float(s.data),
        )
    return image, opacity_img, batch


def audit_batch(batch: RaySampleBatch, tol: float = 1e-5) -> None:
    """Raise AssertionError if any compositing invariant is violated."""
    if batch.t_values.size and not (np.diff(batch.t_values, axis=1) > 0).all():
        raise AssertionError("sample depths are not strictly increasing")
    if batch.alphas.size == 0:
        return
    if batch.alphas.min() < 0 or batch.alphas.max() > 1 + tol:
        raise AssertionError("alpha outside [0, 1]")
    t = batch.transmittance
    if t.min() < -tol or t.max() > 1 + tol:
        raise AssertionError("transmittance outside [0, 1]")
    if not (np.diff(t, axis=1) <= tol).all():
        raise AssertionError("transmittance is not nonincreasing")
    if (batch.weights.sum(axis=1) > 1 + tol).any():
        raise AssertionError("per-ray weights sum above 1")
