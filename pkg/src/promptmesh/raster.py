"""Differentiable z-buffered triangle rasterization.

Coverage is decided in a non-differentiable pass (which triangle owns which
pixel, nearest-depth with lowest-face-id tie-break, world-space back-face
culling against the outward face normals). The shading pass then recomputes
screen-space barycentrics and perspective-correct weights from the tape-tracked
vertex positions for exactly the covered fragments, so gradients reach vertex
positions and colours while pixel coverage stays locally constant — there are
deliberately no silhouette/edge gradients.

Screen convention: continuous pixel coordinates where integer (row, col) is a
pixel center, matching the ray generator. Triangles with any vertex closer
than a small near plane are skipped rather than clipped; cameras orbit well
outside the object bound so this never truncates desk-scale scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .camera import Camera
from .tensor import Tensor
from .volumetric import BACKGROUNDS, shade

NEAR_PLANE = 1e-3


@dataclass
class FragmentBuffer:
    """Covered pixels after depth resolution (one fragment per pixel)."""

    rows: np.ndarray    # (P,) int
    cols: np.ndarray    # (P,) int
    face: np.ndarray    # (P,) int, owning triangle
    bary: np.ndarray    # (P, 3) screen-space barycentrics (reference values)
    weights: np.ndarray  # (P, 3) perspective-correct attribute weights
    depth: np.ndarray   # (P,) view-space depth at the pixel
    width: int = 0
    height: int = 0


def _camera_rotation(cam: Camera) -> np.ndarray:
    right, up, fwd = cam.basis()
    return np.stack([right, up, fwd], axis=1)  # world->view as p @ R


def _project(cam: Camera, verts: np.ndarray):
    """World vertices -> (rows, cols, view depth) in pixel units (numpy)."""
    view = (verts - cam.eye) @ _camera_rotation(cam)
    z = view[:, 2]
    t = cam.tan_half_fov
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = (view[:, 0] / (z * t * cam.aspect) + 1.0) * 0.5 * cam.width - 0.5
        rows = (1.0 - view[:, 1] / (z * t)) * 0.5 * cam.height - 0.5
    return rows, cols, z


def rasterize(vertices: np.ndarray, faces: np.ndarray, cam: Camera) -> FragmentBuffer:
    """Resolve the nearest front-facing triangle per covered pixel."""
    verts = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    empty = FragmentBuffer(*(np.zeros(0, dtype=np.int64),) * 3,
                           np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
                           width=cam.width, height=cam.height)
    if faces.shape[0] == 0:
        return empty

    rows, cols, z = _project(cam, verts)
    bad = ~(np.isfinite(rows) & np.isfinite(cols))
    rows = np.where(bad, 0.0, rows)  # faces behind the near plane are culled;
    cols = np.where(bad, 0.0, cols)  # sanitized here only to keep casts defined
    tri = faces
    v0, v1, v2 = verts[tri[:, 0]], verts[tri[:, 1]], verts[tri[:, 2]]
    # world-space back-face culling: keep faces whose outward normal sees the eye
    normal = np.cross(v1 - v0, v2 - v0)
    facing = np.einsum("fd,fd->f", normal, cam.eye - v0) > 0
    in_front = (z[tri] > NEAR_PLANE).all(axis=1)
    keep = facing & in_front

    r_t = rows[tri]
    c_t = cols[tri]
    r0 = np.clip(np.ceil(r_t.min(axis=1)), 0, cam.height - 1).astype(np.int64)
    r1 = np.clip(np.floor(r_t.max(axis=1)), 0, cam.height - 1).astype(np.int64)
    c0 = np.clip(np.ceil(c_t.min(axis=1)), 0, cam.width - 1).astype(np.int64)
    c1 = np.clip(np.floor(c_t.max(axis=1)), 0, cam.width - 1).astype(np.int64)
    keep &= (r1 >= r0) & (c1 >= c0)
    keep &= (r_t.max(axis=1) >= 0) & (r_t.min(axis=1) <= cam.height - 1)
    keep &= (c_t.max(axis=1) >= 0) & (c_t.min(axis=1) <= cam.width - 1)
    fidx = keep.nonzero()[0]
    if fidx.size == 0:
        return empty

    h_box = (r1 - r0 + 1)[fidx]
    w_box = (c1 - c0 + 1)[fidx]
    counts = h_box * w_box
    face_of = np.repeat(fidx, counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(counts.sum()) - np.repeat(offsets, counts)
    wrep = np.repeat(w_box, counts)
    qr = np.repeat(r0[fidx], counts) + local // wrep
    qc = np.repeat(c0[fidx], counts) + local % wrep

    fr, fc, fz = r_t[face_of], c_t[face_of], z[tri][face_of]
    e = np.empty((qr.size, 3))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        e[:, i] = ((fc[:, k] - fc[:, j]) * (qr - fr[:, j])
                   - (fr[:, k] - fr[:, j]) * (qc - fc[:, j]))
    area2 = e.sum(axis=1)
    nz = area2 != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        bary = e / area2[:, None]
    inside = nz & (bary >= -1e-9).all(axis=1)
    if not inside.any():
        return empty
    face_of, qr, qc, bary, fz = (face_of[inside], qr[inside], qc[inside],
                                 bary[inside], fz[inside])

    inv_z = (bary / fz).sum(axis=1)
    depth = 1.0 / inv_z
    pix = qr * cam.width + qc
    zbuf = np.full(cam.width * cam.height, np.inf)
    np.minimum.at(zbuf, pix, depth)
    near = depth <= zbuf[pix] * (1.0 + 1e-12)
    fbuf = np.full(cam.width * cam.height, np.iinfo(np.int64).max)
    np.minimum.at(fbuf, pix[near], face_of[near])
    win = near & (face_of == fbuf[pix])
    weights = bary[win] / fz[win]
    weights /= weights.sum(axis=1, keepdims=True)
    return FragmentBuffer(rows=qr[win], cols=qc[win], face=face_of[win],
                          bary=bary[win], weights=weights, depth=depth[win],
                          width=cam.width, height=cam.height)


def _cross3(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return T.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx],
                    axis=1)


def shade_fragments(mesh, frag: FragmentBuffer, cam: Camera,
                    shading: str = "albedo", light_dir: np.ndarray | None = None,
                    background: str | np.ndarray = "white") -> Tensor:
    """Differentiable shading of resolved fragments into an (H, W, 3) image.

    Barycentrics and perspective weights are rebuilt from the mesh's
    tape-tracked vertices at the fragments' fixed pixel centers; colours use
    the same Lambertian model as the volumetric renderer, with flat
    per-face normals.
    """
    dt = T.default_dtype()
    bg = BACKGROUNDS[background] if isinstance(background, str) else np.asarray(background, float)
    base = np.broadcast_to(bg.astype(dt), (cam.height * cam.width, 3)).copy()
    if frag.rows.size == 0:
        return T.reshape(T.as_tensor(base), (cam.height, cam.width, 3))

    tri = mesh.faces[frag.face]                      # (P, 3)
    corners = []
    ccolors = []
    for i in range(3):
        corners.append(T.gather_rows(mesh.vertices, tri[:, i]))
        ccolors.append(T.gather_rows(mesh.colors, tri[:, i]))

    rot = T.as_tensor(_camera_rotation(cam).astype(dt))
    eye = cam.eye.astype(dt)
    t = cam.tan_half_fov
    p = frag.rows.size
    views = [T.matmul(v - T.as_tensor(eye), rot) for v in corners]
    zs = [v[:, 2:3] for v in views]
    pix_c = [(vv[:, 0:1] / (zz * (t * cam.aspect)) + 1.0) * (0.5 * cam.width) - 0.5
             for vv, zz in zip(views, zs)]
    pix_r = [(1.0 - vv[:, 1:2] / (zz * t)) * (0.5 * cam.height) - 0.5
             for vv, zz in zip(views, zs)]

    qr = T.as_tensor(frag.rows.astype(dt).reshape(-1, 1))
    qc = T.as_tensor(frag.cols.astype(dt).reshape(-1, 1))
    edges = []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        edges.append((pix_c[k] - pix_c[j]) * (qr - pix_r[j])
                     - (pix_r[k] - pix_r[j]) * (qc - pix_c[j]))
    area2 = edges[0] + edges[1] + edges[2]
    bary = [e / area2 for e in edges]
    over_z = [b / zz for b, zz in zip(bary, zs)]
    denom = over_z[0] + over_z[1] + over_z[2]
    weights = [oz / denom for oz in over_z]

    albedo = None
    for w, c in zip(weights, ccolors):
        contrib = T.bcast_to(w, (p, 3)) * c
        albedo = contrib if albedo is None else albedo + contrib

    if shading == "albedo":
        colors = albedo
    else:
        n = _cross3(corners[1] - corners[0], corners[2] - corners[0])
        norm = T.sqrt(T.tsum(n * n, axis=1, keepdims=True) + 1e-12)
        normals = n / T.bcast_to(norm, n.shape)
        colors = shade(albedo, normals, shading, light_dir)

    pix_lin = frag.rows * cam.width + frag.cols
    img_flat = T.scatter_rows(base, pix_lin, colors)
    return T.reshape(img_flat, (cam.height, cam.width, 3))


def render_stage2(planes, heads, grid, cam: Camera, shading: str = "albedo",
                  light_dir: np.ndarray | None = None,
                  background: str | np.ndarray = "white",
                  track_gradients: bool = True):
    """Extract the mesh from the fields and rasterize it.

    Returns (image, mesh, fragments); an empty extraction produces the plain
    background image (the extract step emits the warning).
    """
    from .tetmesh import extract

    mesh = extract(planes, heads, grid, track_gradients=track_gradients)
    if mesh.empty:
        frag = FragmentBuffer(*(np.zeros(0, dtype=np.int64),) * 3,
                              np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
                              width=cam.width, height=cam.height)
    else:
        frag = rasterize(mesh.vertices.data, mesh.faces, cam)
    image = shade_fragments(mesh, frag, cam, shading=shading,
                            light_dir=light_dir, background=background)
    return image, mesh, frag
