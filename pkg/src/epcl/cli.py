"""Command-line interface: data synthesis, training, evaluation, prediction
and uncertainty reporting.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigKeyError, EpclError


def _apply_thread_env() -> None:
    """EPCL_NUM_THREADS caps worker parallelism (torch intra-op threads)."""
    value = os.environ.get("EPCL_NUM_THREADS")
    if value:
        import torch

        torch.set_num_threads(max(1, int(value)))


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected H,W,D but got {text!r}")
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epcl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"epcl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of training volumes")
    p.add_argument("--shape", type=_parse_shape, default=(48, 48, 48), help="volume shape H,W,D")
    p.add_argument("--classes", type=int, default=2, help="number of classes incl. background")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled-frac", type=float, default=0.1,
                   help="fraction of training volumes whose labels are kept")
    p.add_argument("--test-n", type=int, default=0,
                   help="extra held-out volumes written to the test split")

    p = sub.add_parser("train", help="run Mean-Teacher training")
    p.add_argument("--config", help="YAML config file (TrainConfig keys)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, applied after the file")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--curves", help="write a loss-curve figure to this path after training")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory with splits.json")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--figure", help="Dice bar-chart path (default: alongside the CSV)")

    p = sub.add_parser("predict", help="sliding-window inference on one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="input volume (raw+json or NIfTI)")
    p.add_argument("--out", required=True, help="output prefix (or .nii/.nii.gz path)")

    p = sub.add_parser("uq-report", help="reliability-map comparison report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="input volume")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--axis", type=int, default=2, choices=(0, 1, 2), help="slicing axis")

    return parser


def cmd_synth(args) -> int:
    from .volume_io import save_label_volume, save_raw, synth_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = args.n + args.test_n
    dataset = synth_dataset(total, args.shape, args.classes, args.seed)
    names = []
    for vol, lab in dataset:
        save_raw(out / f"{vol.name}.json", vol.data.astype("<f4"), vol.spacing)
        save_label_volume(lab, out / f"{vol.name}_label.json")
        names.append(vol.name)
    n_labeled = math.ceil(args.labeled_frac * args.n)
    splits = {
        "labeled": names[:n_labeled],
        "unlabeled": names[n_labeled:args.n],
        "test": names[args.n:],
    }
    (out / "splits.json").write_text(json.dumps(splits, indent=2))
    (out / "meta.json").write_text(json.dumps({
        "num_classes": args.classes,
        "shape": list(args.shape),
        "seed": args.seed,
        "labeled_frac": args.labeled_frac,
    }, indent=2))
    print(f"wrote {args.n} train ({n_labeled} labeled) + {args.test_n} test volumes to {out}")
    return 0


def cmd_train(args) -> int:
    from .report import render_training_curves
    from .trainer import load_config, run_training

    config = None
    if args.resume is None:
        config = load_config(args.config, args.override)
    elif args.config or args.override:
        print("note: --config/--override are ignored when resuming", file=sys.stderr)
    ckpt_path, log_path = run_training(config=config, resume_from=args.resume, quiet=False)
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines()]
    if records:
        tail = records[-min(50, len(records)):]
        mean_total = sum(r["total"] for r in tail) / len(tail)
        print(f"final checkpoint: {ckpt_path}")
        print(f"loss log: {log_path}")
        print(f"mean total loss over last {len(tail)} iters: {mean_total:.4f}")
    if args.curves:
        print(f"loss curves: {render_training_curves(log_path, args.curves)}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_segmentation
    from .report import render_metrics_figure, write_metrics_csv
    from .trainer import load_model_for_inference, load_split_dataset, predict

    _, cfg = load_model_for_inference(args.checkpoint)
    data = load_split_dataset(args.data, cfg.num_classes)
    if not data.test:
        raise EpclError(f"dataset {args.data} has no test split to evaluate")
    rows = []
    for vol, gt in data.test:
        pred_labels, _ = predict(args.checkpoint, vol)
        reports = evaluate_segmentation(pred_labels.data, gt.data, cfg.num_classes, vol.spacing)
        for cls, rep in sorted(reports.items()):
            rows.append((vol.name, cls, rep))
    csv_path = write_metrics_csv(rows, args.out)
    figure = args.figure or str(Path(args.out).with_suffix(".png"))
    fig_path = render_metrics_figure(rows, figure)
    print(f"metrics CSV: {csv_path}")
    print(f"figure: {fig_path}")
    return 0


def cmd_predict(args) -> int:
    from .trainer import predict
    from .volume_io import load_volume, normalize_intensity, save_label_volume, save_nifti, save_raw

    vol = normalize_intensity(load_volume(args.input))
    labels, probs = predict(args.checkpoint, vol)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.name.endswith(".nii") or out.name.endswith(".nii.gz"):
        base = out.name[:-len(".nii.gz")] if out.name.endswith(".nii.gz") else out.stem
        suffix = out.name[len(base):]
        save_label_volume(labels, out.parent / f"{base}_label{suffix}", spacing=vol.spacing)
        for c in range(probs.shape[-1]):
            save_nifti(out.parent / f"{base}_prob{c}{suffix}",
                       probs[..., c].astype("<f4"), vol.spacing)
    else:
        save_label_volume(labels, f"{out}_label.json")
        for c in range(probs.shape[-1]):
            save_raw(f"{out}_prob{c}.json", probs[..., c].astype("<f4"), vol.spacing)
    print(f"wrote label map and {probs.shape[-1]} probability volumes with prefix {out}")
    return 0


def cmd_uq_report(args) -> int:
    from .report import write_uq_report
    from .trainer import load_model_for_inference
    from .volume_io import load_volume, normalize_intensity

    model, cfg = load_model_for_inference(args.checkpoint)
    vol = normalize_intensity(load_volume(args.input))
    summary = write_uq_report(model, cfg, vol, args.out, axis=args.axis)
    print(json.dumps(summary, indent=2))
    print(f"report written to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "uq-report": cmd_uq_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_thread_env()
    try:
        return COMMANDS[args.command](args)
    except ConfigKeyError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (EpclError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
