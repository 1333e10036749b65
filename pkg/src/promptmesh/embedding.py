"""Deterministic hash-based prompt embeddings.

Each whitespace-separated word is hashed to a PRNG seed and expanded into a
unit-norm row; the same word always yields the same row, for any process on
any platform. Rows past the word count are zero padding and flagged as such.
A real text encoder can be substituted via an imported embedding matrix.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T

DEFAULT_MAX_TOKENS = 16
DEFAULT_CHANNELS = 64


@dataclass
class PromptEmbedding:
    """Token rows (max_tokens, channels) plus a validity mask."""

    rows: np.ndarray
    mask: np.ndarray  # True where the row is a real token

    @property
    def mean(self) -> np.ndarray:
        return self.rows[self.mask].mean(axis=0)

    @property
    def token_rows(self) -> np.ndarray:
        return self.rows[self.mask]


def _word_seed(word: str, seed: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"),
                             key=struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF),
                             digest_size=8).digest()
    return struct.unpack("<Q", digest)[0]


def embed(prompt: str, seed: int = 0, max_tokens: int = DEFAULT_MAX_TOKENS,
          channels: int = DEFAULT_CHANNELS) -> PromptEmbedding:
    """Embed a prompt; raises ValueError if it contains no words."""
    words = prompt.split()
    if not words:
        raise ValueError("prompt contains no words")
    words = words[:max_tokens]
    rows = np.zeros((max_tokens, channels), dtype=np.float64)
    for i, word in enumerate(words):
        rng = np.random.default_rng(_word_seed(word, seed))
        row = rng.standard_normal(channels)
        rows[i] = row / np.linalg.norm(row)
    mask = np.zeros(max_tokens, dtype=bool)
    mask[:len(words)] = True
    return PromptEmbedding(rows.astype(T.default_dtype()), mask)


def from_matrix(rows: np.ndarray, mask: np.ndarray | None = None) -> PromptEmbedding:
    rows = np.asarray(rows, dtype=T.default_dtype())
    if rows.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    if mask is None:
        mask = np.ones(rows.shape[0], dtype=bool)
    return PromptEmbedding(rows, np.asarray(mask, dtype=bool))


def read_embedding_file(path) -> np.ndarray:
    """Read the binary embedding exchange format.

    Layout: two little-endian uint32 (rows, cols) followed by rows*cols
    little-endian float32 values, row-major.
    """
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8:
            raise ValueError("embedding file truncated (header)")
        rows, cols = struct.unpack("<II", head)
        payload = f.read(rows * cols * 4)
        if len(payload) != rows * cols * 4:
            raise ValueError("embedding file truncated (payload)")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def write_embedding_file(path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        f.write(rows.tobytes())


def import_embedding(path, mask: np.ndarray | None = None) -> PromptEmbedding:
    return from_matrix(read_embedding_file(path), mask)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


VIEW_SUFFIXES = (", front view", ", side view", ", back view", ", overhead view")
OVERHEAD_ELEVATION = 60.0  # degrees; above this the view reads as top-down


def directional_prompt(prompt: str, azimuth: float, elevation: float) -> str:
    """Append exactly one view suffix chosen from the camera direction.

    Elevation above the overhead threshold wins; otherwise the azimuth sector
    decides: front for |az| < 45 deg, side for 45-135 deg, back beyond 135 deg
    (azimuth taken modulo 360 deg, front sector centred on 0).
    """
    if not (np.isfinite(azimuth) and np.isfinite(elevation)):
        raise ValueError("camera angles must be finite")
    if elevation > OVERHEAD_ELEVATION:
        return prompt + VIEW_SUFFIXES[3]
    az = abs((azimuth + 180.0) % 360.0 - 180.0)  # folded to [0, 180]
    if az < 45.0:
        return prompt + VIEW_SUFFIXES[0]
    if az <= 135.0:
        return prompt + VIEW_SUFFIXES[1]
    return prompt + VIEW_SUFFIXES[2]
