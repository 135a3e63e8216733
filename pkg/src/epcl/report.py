"""Report emitters: evaluation CSV with companion figures, training-curve
plots, and the uncertainty-report bundle (per-slice reliability PNGs, a
side-by-side comparison figure and summary statistics JSON)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .metrics import MetricReport, macro_average
from .model import PredictionSet, SegmentationModel
from .trainer import TrainConfig
from .uncertainty import (
    entropy_map,
    export_reliability_slices,
    juq,
    reliability_map,
)
from .volume_io import Volume, assemble_prediction, plan_sliding_window

CSV_COLUMNS = ("volume", "class", "dice", "jaccard", "hd95", "asd", "surface_defined")


def write_metrics_csv(rows: list[tuple[str, int, MetricReport]], path: str | Path) -> Path:
    """One CSV row per (volume, class) plus a final macro-average row.

    Dice and Jaccard are reported as percentages; undefined surface metrics
    appear as empty cells with surface_defined=0.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def _fmt(rep: MetricReport) -> list:
        return [
            f"{rep.dice * 100.0:.4f}",
            f"{rep.jaccard * 100.0:.4f}",
            f"{rep.hd95:.4f}" if rep.surface_defined else "",
            f"{rep.asd:.4f}" if rep.surface_defined else "",
            int(rep.surface_defined),
        ]

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for volume, cls, rep in rows:
            writer.writerow([volume, cls] + _fmt(rep))
        writer.writerow(["macro_average", "all"] + _fmt(macro_average([r for _, _, r in rows])))
    return path


def render_metrics_figure(rows: list[tuple[str, int, MetricReport]], path: str | Path) -> Path:
    """Bar chart of per-volume Dice, grouped by class."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    classes = sorted({cls for _, cls, _ in rows})
    volumes = sorted({vol for vol, _, _ in rows})
    by_key = {(vol, cls): rep.dice * 100.0 for vol, cls, rep in rows}
    x = np.arange(len(volumes))
    width = 0.8 / max(len(classes), 1)
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(volumes)), 4))
    for i, cls in enumerate(classes):
        vals = [by_key.get((vol, cls), np.nan) for vol in volumes]
        ax.bar(x + i * width, vals, width, label=f"class {cls}")
    ax.set_xticks(x + width * (len(classes) - 1) / 2)
    ax.set_xticklabels(volumes, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("Dice (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_training_curves(log_path: str | Path, out_path: str | Path) -> Path:
    """Plot total and component losses plus the ramp weight from a JSONL log."""
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    iters = [r["iteration"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "l_seg", "l_lc"):
        ax1.plot(iters, [r[key] for r in records], label=key, linewidth=0.8)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(iters, [r["lambda_con"] for r in records], color="tab:orange")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("ramp weight")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def sliding_window_prediction_set(model: SegmentationModel, cfg: TrainConfig,
                                  volume: Volume) -> PredictionSet:
    """Full-volume per-head probabilities via overlap-averaged sliding windows."""
    patch, step = tuple(cfg.patch_size), tuple(cfg.stride)
    grid = plan_sliding_window(volume.shape, patch, step)
    num_heads = model.config.num_heads
    per_head_patches: list[list[np.ndarray]] = [[] for _ in range(num_heads)]
    with torch.inference_mode():
        for (i, j, k) in grid.origins:
            chunk = volume.data[i:i + patch[0], j:j + patch[1], k:k + patch[2]]
            x = torch.from_numpy(np.ascontiguousarray(chunk, dtype=np.float32))[None, None]
            preds, _ = model(x)
            for h in range(num_heads):
                per_head_patches[h].append(preds.head_probs[h, 0].permute(1, 2, 3, 0).numpy())
    heads = []
    for h in range(num_heads):
        assembled = assemble_prediction(per_head_patches[h], grid, volume.shape)
        heads.append(torch.from_numpy(assembled).permute(3, 0, 1, 2)[None])  # (1, C, H, W, D)
    return PredictionSet.from_heads(heads)


def write_uq_report(model: SegmentationModel, cfg: TrainConfig, volume: Volume,
                    out_dir: str | Path, axis: int = 2) -> dict:
    """Emit the reliability comparison bundle for one volume.

    Produces per-slice PNG sets for the entropy-only and the JUQ reliability
    maps (equal slice counts), a side-by-side middle-slice figure and a
    summary JSON with per-map statistics.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    preds = sliding_window_prediction_set(model, cfg, volume)

    entropy = entropy_map(preds.mean_probs)
    rel_entropy = reliability_map(entropy, cfg.reliability_mode)
    rel_juq = reliability_map(juq(preds, preds.mean_probs), cfg.reliability_mode)

    entropy_paths = export_reliability_slices(rel_entropy, axis, out_dir / "entropy", "entropy")
    juq_paths = export_reliability_slices(rel_juq, axis, out_dir / "juq", "juq")

    def _stats(m: torch.Tensor) -> dict:
        arr = m.detach().numpy().astype(np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std()),
                "min": float(arr.min()), "max": float(arr.max()),
                "variance": float(arr.var())}

    summary = {
        "volume": volume.name,
        "reliability_mode": cfg.reliability_mode,
        "axis": axis,
        "num_slices": len(juq_paths),
        "entropy_reliability": _stats(rel_entropy.data),
        "juq_reliability": _stats(rel_juq.data),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))

    mid = volume.shape[axis] // 2
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    for ax_, rel, title in ((axes[0], rel_entropy, "entropy-only"), (axes[1], rel_juq, "JUQ")):
        img = np.take(rel.data[0].numpy(), mid, axis=axis)
        im = ax_.imshow(img, cmap="viridis")
        ax_.set_title(f"{title} reliability")
        ax_.axis("off")
        fig.colorbar(im, ax=ax_, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_dir / "side_by_side.png", dpi=120)
    plt.close(fig)

    assert len(entropy_paths) == len(juq_paths)
    return summary
