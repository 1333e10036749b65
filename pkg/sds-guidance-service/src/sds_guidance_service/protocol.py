"""Wire protocol: newline-delimited JSON with base64 float32 pixel payloads.

One JSON object per line. The handshake exchanges {"type": "hello",
"version": 1} for {"type": "hello_ack", "version": 1}; afterwards each
"guide" request is answered by exactly one "grad" or "error" response.
Unknown fields are ignored everywhere.
"""

from __future__ import annotations

import base64
import json

import numpy as np

PROTOCOL_VERSION = 1


class ProtocolViolation(Exception):
    """Malformed or out-of-contract message; reported, connection kept."""


def encode_pixels(array: np.ndarray) -> str:
    """(H, W, 3) floats -> base64 of little-endian float32, row-major."""
    return base64.b64encode(
        np.ascontiguousarray(array, dtype="<f4").tobytes()).decode("ascii")


def decode_pixels(payload: str, height: int, width: int) -> np.ndarray:
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except Exception as exc:
        raise ProtocolViolation(f"pixels are not valid base64: {exc}")
    expected = height * width * 3 * 4
    if len(raw) != expected:
        raise ProtocolViolation(
            f"pixel payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(height, width, 3).copy()


def parse_line(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        line = line.decode("utf-8", errors="replace")
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolViolation(f"line is not valid JSON: {exc}")
    if not isinstance(msg, dict):
        raise ProtocolViolation("message must be a JSON object")
    if not isinstance(msg.get("type"), str):
        raise ProtocolViolation('message lacks a string "type" field')
    return msg


def dump_line(msg: dict) -> bytes:
    return (json.dumps(msg, sort_keys=True) + "\n").encode("utf-8")


def hello_ack() -> dict:
    return {"type": "hello_ack", "version": PROTOCOL_VERSION}


def error_message(text: str) -> dict:
    return {"type": "error", "message": text}


def grad_message(grad: np.ndarray) -> dict:
    return {"type": "grad", "pixels": encode_pixels(grad)}


def parse_guide(msg: dict) -> dict:
    """Validate a guide request; returns the decoded fields."""
    prompt = msg.get("prompt")
    if not isinstance(prompt, str) or not prompt:
        raise ProtocolViolation("guide request needs a non-empty prompt")
    stage = msg.get("stage")
    if stage not in (1, 2):
        raise ProtocolViolation("stage must be 1 or 2")
    try:
        width = int(msg["width"])
        height = int(msg["height"])
    except (KeyError, TypeError, ValueError):
        raise ProtocolViolation("width/height must be integers")
    if width < 1 or height < 1:
        raise ProtocolViolation("width/height must be positive")
    try:
        noise_lo = float(msg.get("noise_lo", 0.0))
        noise_hi = float(msg.get("noise_hi", 1.0))
        guidance_scale = float(msg.get("guidance_scale", 0.0))
    except (TypeError, ValueError):
        raise ProtocolViolation("numeric fields must be numbers")
    if not 0.0 <= noise_lo < noise_hi <= 1.0:
        raise ProtocolViolation("noise range must satisfy 0 <= lo < hi <= 1")
    pixels = msg.get("pixels")
    if not isinstance(pixels, str):
        raise ProtocolViolation("guide request needs a pixels payload")
    image = decode_pixels(pixels, height, width)
    if not np.isfinite(image).all():
        raise ProtocolViolation("pixel payload contains non-finite values")
    return {"prompt": prompt, "stage": int(stage), "image": image,
            "noise_lo": noise_lo, "noise_hi": noise_hi,
            "guidance_scale": guidance_scale}
