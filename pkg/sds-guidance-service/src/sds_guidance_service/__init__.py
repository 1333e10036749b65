"""Score-distillation guidance service.

Serves per-pixel gradients for rendered images over a newline-delimited
JSON protocol (TCP or stdio), using classifier-free-guided noise
prediction with a pluggable backend.
"""

from .protocol import (
    PROTOCOL_VERSION,
    ProtocolViolation,
    decode_pixels,
    encode_pixels,
    parse_guide,
    parse_line,
)
from .sds import (
    WEIGHTINGS,
    AnalyticPredictor,
    NoisePredictor,
    ServiceConfig,
    alpha_bar,
    load_predictor,
    request_seed,
    sds_gradient,
    timestep_weight,
)
from .server import GuidanceServer, serve, serve_stdio

__all__ = [
    "PROTOCOL_VERSION",
    "ProtocolViolation",
    "decode_pixels",
    "encode_pixels",
    "parse_guide",
    "parse_line",
    "WEIGHTINGS",
    "AnalyticPredictor",
    "NoisePredictor",
    "ServiceConfig",
    "alpha_bar",
    "load_predictor",
    "request_seed",
    "sds_gradient",
    "timestep_weight",
    "GuidanceServer",
    "serve",
    "serve_stdio",
]

__version__ = "0.1.0"
