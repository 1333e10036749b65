"""Pinhole cameras, ray generation, and the projection shared by both renderers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_y: float = 50.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError("fov_y must be in (0, 180) degrees")
        if np.allclose(self.eye, self.look_at):
            raise ValueError("eye and look_at coincide")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right-handed (right, up, forward) with forward = look direction."""
        fwd = self.look_at - self.eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        nr = np.linalg.norm(right)
        if nr < 1e-8:
            raise ValueError("up vector is parallel to the view direction")
        right = right / nr
        up = np.cross(right, fwd)
        return right, up, fwd

    @property
    def tan_half_fov(self) -> float:
        return math.tan(math.radians(self.fov_y) * 0.5)

    @property
    def aspect(self) -> float:
        return self.width / self.height


def orbit_camera(azimuth_deg: float, elevation_deg: float, distance: float = 3.0,
                 fov_y: float = 50.0, width: int = 64, height: int = 64) -> Camera:
    """Camera on a sphere around the origin; +z is up, azimuth 0 on +x."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    eye = distance * np.array([math.cos(el) * math.cos(az),
                               math.cos(el) * math.sin(az),
                               math.sin(el)])
    return Camera(eye=eye, look_at=np.zeros(3), fov_y=fov_y,
                  width=width, height=height)


def make_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center rays: origins (H*W, 3) and unit directions (H*W, 3).

    Row r, column c map to flat index r*W + c; the center pixel of an
    odd-sized image looks exactly along normalize(look_at - eye).
    """
    right, up, fwd = cam.basis()
    h, w = cam.height, cam.width
    t = cam.tan_half_fov
    cols = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    rows = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    cg, rg = np.meshgrid(cols, rows)
    dirs = (fwd[None, :]
            + (cg.reshape(-1, 1) * t * cam.aspect) * right[None, :]
            + (rg.reshape(-1, 1) * t) * up[None, :])
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.eye, dirs.shape).copy()
    return origins, dirs


def ray_aabb(origins: np.ndarray, dirs: np.ndarray,
             bound: float) -> tuple[np.ndarray, np.ndarray]:
    """Slab intersection with the cube [-bound, bound]^3.

    Returns (near, far) per ray; a ray misses the box iff far <= near.
    Near is clamped to a small positive value so samples stay in front.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axis-parallel rays: slab test degenerates to an inside check
    par = dirs == 0.0
    inside = (origins >= -bound) & (origins <= bound)
    lo[par] = np.where(inside[par], -np.inf, np.inf)
    hi[par] = np.where(inside[par], np.inf, -np.inf)
    near = np.maximum(lo.max(axis=1), 1e-4)
    far = hi.min(axis=1)
    return near, far


def world_to_view(cam: Camera, pts: np.ndarray) -> np.ndarray:
    """(N, 3) world points -> view coords (x right, y up, z forward-positive)."""
    right, up, fwd = cam.basis()
    rel = np.asarray(pts, dtype=np.float64) - cam.eye
    return rel @ np.stack([right, up, fwd], axis=1)


def view_to_pixels(cam: Camera, view: np.ndarray) -> np.ndarray:
    """View coords -> continuous (row, col) pixel coordinates.

    Matches make_rays: a point on the ray of pixel (r, c) projects onto
    that pixel's center.
    """
    t = cam.tan_half_fov
    z = view[:, 2]
    x_ndc = view[:, 0] / (z * t * cam.aspect)
    y_ndc = view[:, 1] / (z * t)
    col = (x_ndc + 1.0) * 0.5 * cam.width - 0.5
    row = (1.0 - y_ndc) * 0.5 * cam.height - 0.5
    return np.stack([row, col], axis=1)
