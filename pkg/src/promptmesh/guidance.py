"""Training-signal abstraction: rendered image in, per-pixel loss gradient out.

Two providers ship with the package. The photometric provider matches renders
against procedurally generated reference views and is the default desk-scale
signal. The remote provider speaks a newline-delimited JSON protocol (over TCP
or a child process's stdio) to an external scoring service, so heavier priors
can plug in without entering this process.

Wire protocol (one JSON object per line, unknown fields ignored):
    handshake  {"type": "hello", "version": 1}
               {"type": "hello_ack", "version": 1}
    request    {"type": "guide", "prompt": str, "stage": 1|2,
                "width": int, "height": int, "guidance_scale": float,
                "noise_lo": float, "noise_hi": float,
                "pixels": base64(little-endian float32, row-major RGB)}
    response   {"type": "grad", "pixels": same encoding}
               {"type": "error", "message": str}
"""

from __future__ import annotations

import base64
import json
import os
import select
import socket
import subprocess
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1
ADDR_ENV_VAR = "ATOM_GUIDANCE_ADDR"

# timestep-fraction windows for noised-image scoring, per training stage
DEFAULT_NOISE_RANGES = {1: (0.2, 0.98), 2: (0.02, 0.5)}
DEFAULT_GUIDANCE_SCALE = 20.0


class GuidanceError(RuntimeError):
    """Base class for guidance-side failures."""


class ProtocolError(GuidanceError):
    """Malformed or out-of-contract data on the wire."""


class ShapeMismatchError(ProtocolError):
    """Gradient payload length does not match the request image."""


class ServiceError(GuidanceError):
    """The remote service reported an error; message forwarded."""


class GuidanceTimeout(GuidanceError):
    """No response within the configured timeout."""


@dataclass
class GuidanceRequest:
    prompt: str
    image: np.ndarray  # (H, W, 3) floats in [0, 1]
    stage: int = 1
    noise_range: tuple[float, float] | None = None
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("image must be (H, W, 3)")
        if not np.isfinite(img).all():
            raise ValueError("image contains non-finite values")
        if img.min() < -1e-5 or img.max() > 1.0 + 1e-5:
            raise ValueError("image values must lie in [0, 1]")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.noise_range is None:
            self.noise_range = DEFAULT_NOISE_RANGES[self.stage]
        lo, hi = self.noise_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("noise range must satisfy 0 <= lo < hi <= 1")
        self.image = img


@dataclass
class GuidanceResponse:
    grad: np.ndarray          # (H, W, 3), d loss / d pixel
    loss: float | None = None  # diagnostic only


def encode_pixels(arr: np.ndarray) -> str:
    """Row-major RGB float32 little-endian, base64."""
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_pixels(payload: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except Exception as exc:
        raise ProtocolError(f"undecodable pixel payload: {exc}") from exc
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise ShapeMismatchError(
            f"expected {expect} payload bytes for shape {shape}, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resample of an (H, W, C) image."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    rows = (np.arange(height) + 0.5) * (h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (w / width) - 0.5
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)[:, None, None]
    fc = np.clip(cols - c0, 0.0, 1.0)[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


class PhotometricGuidance:
    """Match renders against per-(prompt, view) reference images.

    `targets` maps the fully-suffixed prompt string to a reference image;
    references are resampled to the request resolution when they differ.
    The gradient is that of the mean-squared error over all image entries:
    grad = 2 * (image - target) / image.size.
    """

    def __init__(self, targets: dict[str, np.ndarray]):
        self.targets = dict(targets)

    def __call__(self, req: GuidanceRequest) -> GuidanceResponse:
        if req.prompt not in self.targets:
            raise GuidanceError(f"no reference views for prompt {req.prompt!r}")
        target = np.asarray(self.targets[req.prompt], dtype=np.float64)
        h, w, _ = req.image.shape
        if target.shape[:2] != (h, w):
            target = resize_bilinear(target, h, w)
        diff = req.image.astype(np.float64) - target
        grad = (2.0 / diff.size) * diff
        loss = float(np.mean(diff * diff))
        return GuidanceResponse(grad=grad.astype(np.float32), loss=loss)


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        self.timeout = timeout
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise GuidanceError(f"cannot connect to {host}:{port}: {exc}") from exc
        self.sock.settimeout(timeout)
        self.reader = self.sock.makefile("rb")

    def send_line(self, text: str) -> None:
        self.sock.sendall(text.encode("utf-8") + b"\n")

    def recv_line(self) -> str:
        try:
            line = self.reader.readline()
        except socket.timeout as exc:
            raise GuidanceTimeout("timed out waiting for service reply") from exc
        if not line:
            raise ProtocolError("service closed the connection")
        return line.decode("utf-8")

    def close(self) -> None:
        try:
            self.reader.close()
            self.sock.close()
        except OSError:
            pass


class _StdioTransport:
    """Speak the protocol over a child process's stdin/stdout."""

    def __init__(self, command: list[str], timeout: float):
        self.timeout = timeout
        self.proc = subprocess.Popen(command, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE, bufsize=0)

    def send_line(self, text: str) -> None:
        self.proc.stdin.write(text.encode("utf-8") + b"\n")
        self.proc.stdin.flush()

    def recv_line(self) -> str:
        buf = bytearray()
        fd = self.proc.stdout.fileno()
        while True:
            ready, _, _ = select.select([fd], [], [], self.timeout)
            if not ready:
                raise GuidanceTimeout("timed out waiting for service reply")
            chunk = os.read(fd, 1)
            if not chunk:
                raise ProtocolError("service closed its stdout")
            if chunk == b"\n":
                return buf.decode("utf-8")
            buf.extend(chunk)

    def close(self) -> None:
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()


class RemoteGuidance:
    """Protocol client. Address "host:port" for TCP, or a command list for
    a stdio child process; the ATOM_GUIDANCE_ADDR environment variable
    overrides the address when none is given explicitly."""

    def __init__(self, address: str | None = None,
                 command: list[str] | None = None, timeout: float = 30.0):
        if command is not None:
            self.transport = _StdioTransport(command, timeout)
        else:
            address = address or os.environ.get(ADDR_ENV_VAR)
            if not address:
                raise GuidanceError(
                    f"no service address (set {ADDR_ENV_VAR} or pass one)")
            host, _, port = address.rpartition(":")
            if not host or not port.isdigit():
                raise GuidanceError(f"bad service address {address!r}")
            self.transport = _TcpTransport(host, int(port), timeout)
        self._handshake()

    def _handshake(self) -> None:
        self.transport.send_line(json.dumps(
            {"type": "hello", "version": PROTOCOL_VERSION}))
        msg = self._read_message()
        if msg.get("type") != "hello_ack":
            raise ProtocolError(f"expected hello_ack, got {msg.get('type')!r}")
        if msg.get("version") != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch: ours {PROTOCOL_VERSION}, "
                f"service {msg.get('version')!r}")

    def _read_message(self) -> dict:
        line = self.transport.recv_line()
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable service reply: {exc}") from exc
        if not isinstance(msg, dict):
            raise ProtocolError("service reply is not a JSON object")
        return msg

    def __call__(self, req: GuidanceRequest) -> GuidanceResponse:
        h, w, _ = req.image.shape
        lo, hi = req.noise_range
        self.transport.send_line(json.dumps({
            "type": "guide",
            "prompt": req.prompt,
            "stage": req.stage,
            "width": w,
            "height": h,
            "guidance_scale": req.guidance_scale,
            "noise_lo": lo,
            "noise_hi": hi,
            "pixels": encode_pixels(req.image),
        }))
        msg = self._read_message()
        kind = msg.get("type")
        if kind == "error":
            raise ServiceError(str(msg.get("message", "unspecified error")))
        if kind != "grad":
            raise ProtocolError(f"expected grad reply, got {kind!r}")
        if "pixels" not in msg:
            raise ProtocolError("grad reply is missing its pixel payload")
        grad = decode_pixels(msg["pixels"], (h, w, 3))
        if not np.isfinite(grad).all():
            raise ProtocolError("service returned non-finite gradients")
        return GuidanceResponse(grad=grad)

    def close(self) -> None:
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
