"""Command line for the guidance service."""

from __future__ import annotations

import argparse
import sys

from .sds import ServiceConfig
from .server import serve


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected 'lo,hi', got {text!r}")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sds-guidance-service",
        description="Score-distillation gradient service speaking the "
                    "newline-delimited JSON guidance protocol.")
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--port", type=int, default=None,
                      help="listen on this TCP port (0 picks one)")
    mode.add_argument("--stdio", action="store_true",
                      help="serve a single peer over stdin/stdout")
    parser.add_argument("--mock", action="store_true",
                        help="answer every request with a zero gradient")
    parser.add_argument("--model", default=None,
                        help="noise-predictor backend as 'module:factory'")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--guidance-scale", type=float, default=20.0)
    parser.add_argument("--stage1-range", type=_range, default=(0.2, 0.98),
                        metavar="LO,HI")
    parser.add_argument("--stage2-range", type=_range, default=(0.02, 0.5),
                        metavar="LO,HI")
    parser.add_argument("--weighting", choices=("constant", "snr"),
                        default="constant")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ServiceConfig(
            port=args.port, stdio=args.stdio, mock=args.mock,
            model=args.model, device=args.device,
            guidance_scale=args.guidance_scale,
            stage1_range=args.stage1_range, stage2_range=args.stage2_range,
            weighting=args.weighting, seed=args.seed)
    except ValueError as exc:
        print(f"sds-guidance-service: {exc}", file=sys.stderr)
        return 1
    try:
        serve(cfg)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
