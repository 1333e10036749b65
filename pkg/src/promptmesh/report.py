"""Training-run report: delimited metrics plus rendered figures.

Consumes the history records the trainer emits (one dict per iteration) and
writes, into one directory: a CSV of the raw per-iteration metrics, a loss
curve, a PSNR curve (the photometric loss is a mean-squared error, so
PSNR = -10*log10(loss)), and — when a checkpoint and dataset are supplied —
a gallery image comparing renders against their reference views.
"""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import metrics, training  # noqa: E402

HISTORY_FIELDS = ("stage", "iteration", "loss", "lr", "skipped",
                  "empty_meshes", "elapsed")


def write_history_jsonl(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_history_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _psnr_from_loss(loss: float) -> float:
    if not loss or loss <= 0 or not math.isfinite(loss):
        return float("nan")
    return -10.0 * math.log10(loss)


def write_metrics_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(HISTORY_FIELDS) + ["psnr"])
        for rec in history:
            row = [rec.get(k, "") for k in HISTORY_FIELDS]
            row.append(f"{_psnr_from_loss(rec.get('loss', float('nan'))):.4f}")
            writer.writerow(row)


def _curve_figure(history: list[dict], out_path, value_fn, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for stage in sorted({r["stage"] for r in history}):
        recs = [r for r in history if r["stage"] == stage and not r.get("skipped")]
        if not recs:
            continue
        ax.plot([r["iteration"] for r in recs], [value_fn(r) for r in recs],
                label=f"stage {stage}", linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def _gallery_figure(model, dataset, out_path, *, stage: int,
                    resolution: int = 96, max_prompts: int = 8) -> None:
    prompts = dataset.prompts[:max_prompts]
    fig, axes = plt.subplots(2, len(prompts),
                             figsize=(2.0 * len(prompts), 4.2), squeeze=False)
    grid = training.tetmesh.build_grid(model.cfg.grid_res, model.cfg.bound)
    for col, prompt in enumerate(prompts):
        render = training.render_view(model, prompt, 0.0, 15.0, stage=stage,
                                      resolution=resolution, grid=grid)
        target = dataset.targets[prompt + ", front view"]
        axes[0][col].imshow(np.clip(render, 0, 1))
        axes[0][col].set_title(prompt, fontsize=6)
        axes[1][col].imshow(np.clip(target, 0, 1))
        for row in (0, 1):
            axes[row][col].set_xticks([])
            axes[row][col].set_yticks([])
    axes[0][0].set_ylabel("render", fontsize=8)
    axes[1][0].set_ylabel("reference", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def write_report(history: list[dict], out_dir, *, checkpoint=None,
                 dataset=None) -> list[str]:
    """Write metrics CSV + figures; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    csv_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(history, csv_path)
    written.append(csv_path)

    if history:
        loss_path = os.path.join(out_dir, "loss_curve.png")
        _curve_figure(history, loss_path, lambda r: r["loss"], "loss")
        written.append(loss_path)
        psnr_path = os.path.join(out_dir, "psnr_curve.png")
        _curve_figure(history, psnr_path,
                      lambda r: _psnr_from_loss(r["loss"]), "PSNR (dB)")
        written.append(psnr_path)

    if checkpoint is not None and dataset is not None:
        model = training.Model.from_checkpoint(checkpoint)
        gallery_path = os.path.join(out_dir, "gallery.png")
        _gallery_figure(model, dataset, gallery_path, stage=checkpoint.stage)
        written.append(gallery_path)

        psnr_csv = os.path.join(out_dir, "view_psnr.csv")
        grid = training.tetmesh.build_grid(model.cfg.grid_res, model.cfg.bound)
        with open(psnr_csv, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["prompt", "split", "psnr_front_view"])
            for prompt in dataset.prompts:
                render = training.render_view(model, prompt, 0.0, 15.0,
                                              stage=checkpoint.stage,
                                              resolution=96, grid=grid)
                target = dataset.targets[prompt + ", front view"]
                if target.shape[0] != 96:
                    from .guidance import resize_bilinear
                    target = resize_bilinear(target, 96, 96)
                split = "seen" if prompt in dataset.seen else "unseen"
                writer.writerow([prompt, split,
                                 f"{metrics.psnr(render, target):.4f}"])
        written.append(psnr_csv)
    return written
