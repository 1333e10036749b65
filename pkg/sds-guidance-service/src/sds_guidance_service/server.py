"""The serving loop: handshake, then one guide request per response.

Protocol violations produce an error response and leave the connection
open; only EOF or a transport error ends it. TCP mode serves each
connection on its own thread; stdio mode serves a single peer over
stdin/stdout for child-process deployment.
"""

from __future__ import annotations

import socketserver
import sys

import numpy as np

from . import protocol, sds


class _Session:
    """One peer's message loop, transport-agnostic."""

    def __init__(self, cfg: sds.ServiceConfig,
                 predictor: sds.NoisePredictor | None):
        self.cfg = cfg
        self.predictor = predictor
        self.greeted = False

    def respond(self, line: bytes) -> bytes | None:
        """One reply per input line; None for blank keep-alive lines."""
        if not line.strip():
            return None
        try:
            msg = protocol.parse_line(line)
        except protocol.ProtocolViolation as exc:
            return protocol.dump_line(protocol.error_message(str(exc)))
        kind = msg["type"]
        if kind == "hello":
            if msg.get("version") != protocol.PROTOCOL_VERSION:
                return protocol.dump_line(protocol.error_message(
                    f"unsupported protocol version {msg.get('version')!r}; "
                    f"this service speaks {protocol.PROTOCOL_VERSION}"))
            self.greeted = True
            return protocol.dump_line(protocol.hello_ack())
        if kind == "guide":
            if not self.greeted:
                return protocol.dump_line(protocol.error_message(
                    "guide request before handshake"))
            return self._guide(msg)
        return protocol.dump_line(protocol.error_message(
            f"unknown message type {kind!r}"))

    def _guide(self, msg: dict) -> bytes:
        try:
            req = protocol.parse_guide(msg)
        except protocol.ProtocolViolation as exc:
            return protocol.dump_line(protocol.error_message(str(exc)))
        if self.cfg.mock or self.predictor is None:
            grad = np.zeros_like(req["image"])
            return protocol.dump_line(protocol.grad_message(grad))
        try:
            lo, hi = self.cfg.stage_range(req["stage"])
            lo = max(lo, req["noise_lo"])
            hi = min(hi, req["noise_hi"])
            if not lo < hi:
                lo, hi = self.cfg.stage_range(req["stage"])
            rng = np.random.default_rng(sds.request_seed(
                self.cfg.seed, req["prompt"], req["stage"],
                req["noise_lo"], req["noise_hi"],
                np.ascontiguousarray(req["image"], dtype="<f4").tobytes()))
            t_fraction = float(rng.uniform(lo, hi))
            grad = sds.sds_gradient(
                req["image"], req["prompt"], t_fraction,
                req["guidance_scale"] or self.cfg.guidance_scale,
                self.predictor, rng, self.cfg.weighting)
        except Exception as exc:  # model failure -> protocol error message
            return protocol.dump_line(protocol.error_message(
                f"guidance failed: {exc}"))
        return protocol.dump_line(protocol.grad_message(grad))


def _resolve_predictor(cfg: sds.ServiceConfig,
                       predictor: sds.NoisePredictor | None
                       ) -> sds.NoisePredictor | None:
    if predictor is not None or cfg.mock:
        return predictor
    return sds.load_predictor(cfg.model, cfg.device)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = _Session(self.server.service_cfg, self.server.predictor)
        while True:
            line = self.rfile.readline()
            if not line:
                return
            reply = session.respond(line)
            if reply is not None:
                self.wfile.write(reply)
                self.wfile.flush()


class GuidanceServer(socketserver.ThreadingTCPServer):
    """One thread per connection; one request in flight per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, cfg: sds.ServiceConfig,
                 predictor: sds.NoisePredictor | None = None):
        self.service_cfg = cfg
        self.predictor = _resolve_predictor(cfg, predictor)
        super().__init__(("127.0.0.1", cfg.port), _Handler)

    @property
    def bound_port(self) -> int:
        return self.server_address[1]


def serve_stdio(cfg: sds.ServiceConfig,
                predictor: sds.NoisePredictor | None = None,
                stdin=None, stdout=None) -> None:
    """Blocking single-peer loop over stdin/stdout (child-process mode)."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    session = _Session(cfg, _resolve_predictor(cfg, predictor))
    for line in iter(stdin.readline, b""):
        reply = session.respond(line)
        if reply is not None:
            stdout.write(reply)
            stdout.flush()


def serve(cfg: sds.ServiceConfig,
          predictor: sds.NoisePredictor | None = None) -> None:
    """Run forever in the configured listen mode."""
    if cfg.stdio:
        serve_stdio(cfg, predictor)
    else:
        with GuidanceServer(cfg, predictor) as server:
            print(f"listening on 127.0.0.1:{server.bound_port}",
                  file=sys.stderr, flush=True)
            server.serve_forever()
