"""Command-line surface: dataset building, training, inference, rendering,
mesh export, gradient audit, latency bench, and report generation.

Exit codes: 0 success, 1 user error (bad flags, missing files, invalid
config), 2 internal error (traceback on stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import shlex
import statistics
import sys
import time
import traceback

from . import dataset as dataset_mod
from . import formats, gradcheck, report, training
from .guidance import ADDR_ENV_VAR, PhotometricGuidance, RemoteGuidance

PROG = "promptmesh"
STAGE1_CKPT = "stage1.ckpt"
STAGE2_CKPT = "stage2.ckpt"


class UserError(Exception):
    """A problem the user can fix; reported on stderr with exit status 1."""


class _Parser(argparse.ArgumentParser):
    """argparse parser that reports usage errors as UserError (exit 1)
    instead of argparse's default exit status 2."""

    def error(self, message):
        raise UserError(f"{self.prog}: error: {message}\n"
                        f"{self.format_usage().rstrip()}")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    """Top-level JSON config: paths, guidance mode, and training overrides."""

    dataset_dir: str = "dataset"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"
    guidance: str = "oracle"
    train: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if not os.path.exists(path):
            raise UserError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise UserError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise UserError(f"config root must be a JSON object: {path}")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise UserError(f"unknown config key: {key!r}")
        cfg = cls(**raw)
        if not isinstance(cfg.train, dict):
            raise UserError('config "train" must be a JSON object')
        if not isinstance(cfg.guidance, str):
            raise UserError('config "guidance" must be a string')
        return cfg


def _load_run_dataset(directory) -> dataset_mod.Dataset:
    manifest = os.path.join(directory, dataset_mod.MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise UserError(f"dataset not found: {manifest}")
    try:
        return dataset_mod.load_dataset(directory)
    except (OSError, ValueError, KeyError) as exc:
        raise UserError(f"failed to load dataset {directory}: {exc}")


def _train_config(run: RunConfig,
                  data: dataset_mod.Dataset) -> training.TrainConfig:
    """Desk preset with prompts from the dataset manifest, then the config
    file's "train" overrides on top (unknown keys rejected by name)."""
    overrides = dict(run.train)
    known = {f.name for f in dataclasses.fields(training.TrainConfig)}
    for key in overrides:
        if key not in known:
            raise UserError(f"unknown config key: {key!r}")
    seen = overrides.pop("seen_prompts", data.seen)
    unseen = overrides.pop("unseen_prompts", data.unseen)
    try:
        return training.TrainConfig.desk(seen, unseen, **overrides)
    except (ValueError, TypeError) as exc:
        raise UserError(f"invalid training config: {exc}")


def _provider(run: RunConfig, data: dataset_mod.Dataset | None):
    if os.environ.get(ADDR_ENV_VAR):
        return RemoteGuidance()  # explicit env address wins over the config
    mode = run.guidance
    if mode == "oracle":
        if data is None:
            raise UserError("oracle guidance needs a dataset")
        return PhotometricGuidance(data.targets)
    if mode.startswith("remote:"):
        return RemoteGuidance(address=mode[len("remote:"):])
    if mode.startswith("stdio:"):
        command = shlex.split(mode[len("stdio:"):])
        if not command:
            raise UserError("stdio guidance mode has an empty command")
        return RemoteGuidance(command=command)
    raise UserError(f"unknown guidance mode: {mode!r} "
                    '(expected "oracle", "remote:host:port", or "stdio:cmd")')


def _load_checkpoint(path) -> training.Checkpoint:
    if not os.path.exists(path):
        raise UserError(f"checkpoint not found: {path}")
    try:
        return training.load_checkpoint(path)
    except ValueError as exc:
        raise UserError(f"failed to load checkpoint {path}: {exc}")


def _prompt_slug(prompt: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", prompt.lower()).strip("_")
    return slug or "mesh"


def _parse_view(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise UserError(f'bad --view {text!r}: expected "azimuth,elevation"')
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise UserError(f'bad --view {text!r}: expected two numbers')


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_dataset_build(args) -> int:
    manifest = dataset_mod.build_dataset(
        args.out, n_shapes=args.shapes, n_themes=args.themes,
        resolution=args.resolution, grid_res=args.grid_res, seed=args.seed)
    n_prompts = len(manifest["seen"]) + len(manifest["unseen"])
    print(f"wrote {len(manifest['views'])} views for {n_prompts} prompts "
          f"({len(manifest['seen'])} seen / {len(manifest['unseen'])} "
          f"held out) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    data = _load_run_dataset(run.dataset_dir)
    cfg = _train_config(run, data)
    provider = _provider(run, data)
    os.makedirs(run.checkpoint_dir, exist_ok=True)
    os.makedirs(run.output_dir, exist_ok=True)
    s1_path = os.path.join(run.checkpoint_dir, STAGE1_CKPT)
    s2_path = os.path.join(run.checkpoint_dir, STAGE2_CKPT)
    history: list[dict] = []
    last_ckpt = None

    if args.stage in ("1", "both"):
        start = time.perf_counter()
        ckpt = training.train_stage1(cfg, provider, history=history)
        training.save_checkpoint(ckpt, s1_path)
        last_ckpt = ckpt
        print(f"stage 1: {cfg.stage1_iters} iterations in "
              f"{time.perf_counter() - start:.1f}s, wrote {s1_path}")

    if args.stage in ("2", "both"):
        if args.stage == "2" and not args.from_scratch:
            last_ckpt = _load_checkpoint(s1_path)
        base = None if args.from_scratch else last_ckpt
        start = time.perf_counter()
        ckpt = training.train_stage2(cfg, base, provider, history=history)
        training.save_checkpoint(ckpt, s2_path)
        last_ckpt = ckpt
        origin = "from scratch" if args.from_scratch else "from stage 1"
        print(f"stage 2 ({origin}): {cfg.stage2_iters} iterations in "
              f"{time.perf_counter() - start:.1f}s, wrote {s2_path}")

    history_path = os.path.join(run.output_dir, "history.jsonl")
    report.write_history_jsonl(history, history_path)
    print(f"wrote {history_path}")

    for path in report.write_report(history, run.output_dir,
                                    checkpoint=last_ckpt, dataset=data):
        print(f"wrote {path}")
    return 0


def _cmd_infer(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    mesh, seconds = training.infer(args.prompt, ckpt,
                                   grid_resolution=args.grid_res)
    out = args.out or _prompt_slug(args.prompt) + ".ply"
    formats.write_ply(mesh, out)
    print(f"wrote {out} ({mesh.faces.shape[0]} triangles), "
          f"elapsed {seconds * 1000.0:.1f} ms")
    return 0


def _cmd_render(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    azimuth, elevation = _parse_view(args.view)
    stage = args.stage or max(ckpt.stage, 1)
    model = training.Model.from_checkpoint(ckpt)
    image = training.render_view(model, args.prompt, azimuth, elevation,
                                 stage=stage, resolution=args.resolution)
    formats.write_image(image, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_export(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    mesh, _ = training.infer(args.prompt, ckpt, grid_resolution=args.grid_res)
    formats.write_ply(mesh, args.out)
    print(f"wrote {args.out} ({mesh.vertices.shape[0]} vertices, "
          f"{mesh.faces.shape[0]} triangles)")
    return 0


def _cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = gradcheck.run_gradcheck(verbose=args.verbose)
    overall = results["overall"]
    status = "pass" if overall < gradcheck.PASS_THRESHOLD else "FAIL"
    print(f"max relative error: {overall:.3e} ({status}, "
          f"threshold {gradcheck.PASS_THRESHOLD:g}, "
          f"{time.perf_counter() - start:.1f}s)")
    return 0 if overall < gradcheck.PASS_THRESHOLD else 1


def _cmd_bench(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = training.Model.from_checkpoint(ckpt)
    prompt = args.prompt or (ckpt.config.get("seen_prompts") or ["sphere"])[0]
    times = []
    for _ in range(args.runs):
        _, seconds = training.infer(prompt, model,
                                    grid_resolution=args.grid_res)
        times.append(seconds)
    median = statistics.median(times)
    print(f"infer {prompt!r}: median {median * 1000.0:.1f} ms over "
          f"{args.runs} runs (min {min(times) * 1000.0:.1f}, "
          f"max {max(times) * 1000.0:.1f})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("run,seconds\n")
            for i, seconds in enumerate(times):
                f.write(f"{i},{seconds:.6f}\n")
        print(f"wrote {args.out}")
    return 0


def _cmd_report(args) -> int:
    history = report.read_history_jsonl(args.history) if args.history else []
    ckpt = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    data = _load_run_dataset(args.dataset) if args.dataset else None
    for path in report.write_report(history, args.out,
                                    checkpoint=ckpt, dataset=data):
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p_dataset = sub.add_parser("dataset", help="dataset utilities")
    dsub = p_dataset.add_subparsers(dest="dataset_command",
                                    metavar="subcommand")
    dsub.required = True
    p_build = dsub.add_parser("build", help="render the compositional "
                              "prompt-grid target views")
    p_build.add_argument("--out", default="dataset")
    p_build.add_argument("--shapes", type=int, default=4)
    p_build.add_argument("--themes", type=int, default=4)
    p_build.add_argument("--resolution", type=int, default=128)
    p_build.add_argument("--grid-res", type=int, default=64)
    p_build.add_argument("--seed", type=int, default=0)
    p_build.set_defaults(func=_cmd_dataset_build)

    p_train = sub.add_parser("train", help="run amortized training")
    p_train.add_argument("--config", required=True,
                         help="run-config JSON path")
    p_train.add_argument("--stage", choices=("1", "2", "both"),
                         default="both")
    p_train.add_argument("--from-scratch", action="store_true",
                         help="stage 2 without a stage-1 initialization")
    p_train.set_defaults(func=_cmd_train)

    p_infer = sub.add_parser("infer", help="feed-forward text to mesh")
    p_infer.add_argument("--prompt", required=True)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--out", default=None,
                         help="PLY path (default: derived from the prompt)")
    p_infer.add_argument("--grid-res", type=int, default=None)
    p_infer.set_defaults(func=_cmd_infer)

    p_render = sub.add_parser("render", help="render one view to a PPM")
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--prompt", required=True)
    p_render.add_argument("--view", default="0,15",
                          help='"azimuth,elevation" in degrees')
    p_render.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p_render.add_argument("--resolution", type=int, default=128)
    p_render.add_argument("--out", default="render.ppm")
    p_render.set_defaults(func=_cmd_render)

    p_export = sub.add_parser("export", help="write a mesh PLY")
    p_export.add_argument("--prompt", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--grid-res", type=int, default=None)
    p_export.set_defaults(func=_cmd_export)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference gradient audit")
    p_grad.add_argument("--verbose", action="store_true")
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_bench = sub.add_parser("bench", help="inference latency benchmark")
    p_bench.add_argument("--checkpoint", required=True)
    p_bench.add_argument("--prompt", default=None)
    p_bench.add_argument("--runs", type=int, default=10)
    p_bench.add_argument("--grid-res", type=int, default=None)
    p_bench.add_argument("--out", default=None, help="CSV of per-run times")
    p_bench.set_defaults(func=_cmd_bench)

    p_report = sub.add_parser("report",
                              help="write metrics CSV and figures")
    p_report.add_argument("--history", default=None,
                          help="training history JSONL")
    p_report.add_argument("--out", default="out")
    p_report.add_argument("--checkpoint", default=None)
    p_report.add_argument("--dataset", default=None)
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UserError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
