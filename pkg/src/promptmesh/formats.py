"""Bit-exact file formats: binary little-endian PLY meshes and P6 PPM images.

Every writer here has a matching reader so round-trips can be verified in
tests and downstream tools; both formats are fully specified in this file
with no codec dependencies.
"""

from __future__ import annotations

import struct

import numpy as np


def _as_array(value) -> np.ndarray:
    data = getattr(value, "data", value)
    return np.asarray(data)


# ---------------------------------------------------------------------------
# PLY (binary little-endian 1.0)
# ---------------------------------------------------------------------------

def write_ply(mesh, path) -> None:
    """Write vertices as float x,y,z + uchar red,green,blue and faces as
    uchar-count + int index lists. Colors are stored as round(255 * c)."""
    verts = _as_array(mesh.vertices).astype("<f4")
    colors = _as_array(mesh.colors)
    faces = np.asarray(mesh.faces, dtype="<i4")
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise ValueError("vertices must be (N, 3)")
    if colors.shape != verts.shape:
        raise ValueError("colors must match vertices in shape")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ValueError("faces must be (F, 3)")
    rgb = np.clip(np.rint(np.clip(colors, 0.0, 1.0) * 255.0), 0, 255)
    rgb = rgb.astype(np.uint8)

    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            for pos, col in zip(verts, rgb):
                f.write(struct.pack("<fff", *pos))
                f.write(struct.pack("BBB", *col))
            for face in faces:
                f.write(struct.pack("<Biii", 3, *face))
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc}") from exc


def read_ply(path):
    """Minimal reader for the exact layout write_ply produces.

    Returns (vertices float32 (N,3), colors uint8 (N,3), faces int32 (F,3)).
    """
    with open(path, "rb") as f:
        raw = f.read()
    marker = b"end_header\n"
    split = raw.find(marker)
    if split < 0 or not raw.startswith(b"ply"):
        raise ValueError(f"{path} is not a PLY file")
    header = raw[:split].decode("ascii").splitlines()
    body = raw[split + len(marker):]

    n_vertex = n_face = None
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vertex = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:2] == ["format", "binary_little_endian"]:
            pass
    if n_vertex is None or n_face is None:
        raise ValueError(f"{path}: missing element declarations")

    stride = 12 + 3
    need = n_vertex * stride + n_face * (1 + 12)
    if len(body) < need:
        raise ValueError(f"{path}: truncated payload")
    vert_blob = body[:n_vertex * stride]
    verts = np.zeros((n_vertex, 3), dtype=np.float32)
    colors = np.zeros((n_vertex, 3), dtype=np.uint8)
    for i in range(n_vertex):
        off = i * stride
        verts[i] = struct.unpack_from("<fff", vert_blob, off)
        colors[i] = struct.unpack_from("BBB", vert_blob, off + 12)
    faces = np.zeros((n_face, 3), dtype=np.int32)
    off = n_vertex * stride
    for i in range(n_face):
        count = body[off]
        if count != 3:
            raise ValueError(f"{path}: non-triangle face of {count} vertices")
        faces[i] = struct.unpack_from("<iii", body, off + 1)
        off += 1 + 12
    return verts, colors, faces


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)
# ---------------------------------------------------------------------------

def write_image(img, path) -> None:
    """Write an (H, W, 3) image with values in [0, 1] as binary PPM;
    each channel is round(255 * v)."""
    img = _as_array(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    h, w, _ = img.shape
    payload = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255)
    payload = payload.astype(np.uint8)
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(payload.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def read_image(path) -> np.ndarray:
    """Read a binary PPM into float64 (H, W, 3) values in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    # header = three whitespace-separated tokens after the magic, with
    # '#' comments allowed between them
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path} is not a P6 PPM file")
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0
