"""Mean-Teacher training loop: batch assembly, augmentation, joint
uncertainty, prototype fusion, consistency losses, optimization, EMA and
checkpointing, plus sliding-window inference.

Reproducibility contract: (seed, config, data) fully determine the loss log.
All data-side randomness flows through two numpy generators (batch sampling
and augmentation) whose states are checkpointed, so a resumed run continues
the uninterrupted trajectory bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .augmentation import Sample, augment_labeled_batch, augment_unlabeled_batch, random_flip_rotate
from .errors import ConfigKeyError, NonFiniteLossError, PatchLargerThanVolumeError
from .model import (
    BackboneConfig,
    PredictionSet,
    SegmentationModel,
    TeacherStudentPair,
    build_pair,
    ema_update,
    load_checkpoint,
    save_checkpoint,
)
from .prototypes import fuse_global, fuse_prototypes, similarity_map, unlabeled_prototypes, labeled_prototypes
from .uncertainty import juq, refine_pseudo_labels, reliability_map
from .volume_io import (
    LabelVolume,
    Volume,
    assemble_prediction,
    load_label_volume,
    load_volume,
    normalize_intensity,
    plan_sliding_window,
)

COMBINATION_MODES = ("concat", "separate_multi_proto", "aug_map_on_orig", "orig_map_on_aug")

PRESETS = {
    "tiny": {"base_filters": 8, "depth": 3, "patch_size": (32, 32, 32), "stride": (16, 16, 16)},
    "paper": {"base_filters": 16, "depth": 4, "patch_size": (112, 112, 80), "stride": (18, 18, 4)},
}


@dataclass
class TrainConfig:
    """Flat training configuration; any field is a valid config-file key."""

    preset: str = "tiny"
    seed: int = 1337
    total_iters: int = 14000
    lr: float = 0.001
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_max: float = 1.0
    ema_decay: float = 0.99
    combination_mode: str = "separate_multi_proto"
    reliability_mode: str = "verbatim_eq6"
    prototype_tap: int = 2
    num_classes: int = 2
    base_filters: int | None = None
    depth: int | None = None
    patch_size: tuple[int, int, int] | None = None
    stride: tuple[int, int, int] | None = None
    sim_temperature: float = 1.0
    focal_gamma: float = 2.0
    supervised_only: bool = False
    geometric_aug: bool = False
    checkpoint_every: int = 1000
    data_dir: str = ""
    out_dir: str = "runs/default"

    def resolved(self) -> "TrainConfig":
        """Fill preset-dependent fields left as None and validate choices."""
        if self.preset not in PRESETS:
            raise ConfigKeyError(f"unknown preset {self.preset!r}; valid: {sorted(PRESETS)}")
        if self.combination_mode not in COMBINATION_MODES:
            raise ConfigKeyError(
                f"unknown combination_mode {self.combination_mode!r}; valid: {COMBINATION_MODES}"
            )
        out = dataclasses.replace(self)
        for key, value in PRESETS[self.preset].items():
            if getattr(out, key) is None:
                setattr(out, key, value)
        out.patch_size = tuple(out.patch_size)
        out.stride = tuple(out.stride)
        return out

    def backbone_config(self) -> BackboneConfig:
        cfg = self.resolved()
        return BackboneConfig(
            base_filters=cfg.base_filters,
            depth=cfg.depth,
            num_classes=cfg.num_classes,
            prototype_tap=min(cfg.prototype_tap, cfg.depth - 1),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("patch_size", "stride"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, value):
    """Coerce a config-file or override value to the field's declared type."""
    if key not in _FIELD_TYPES:
        raise ConfigKeyError(
            f"unknown config key {key!r}; valid keys: {', '.join(sorted(_FIELD_TYPES))}"
        )
    ftype = _FIELD_TYPES[key]
    if value is None:
        return None
    if "tuple" in ftype:
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    if ftype.startswith("bool"):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if ftype.startswith("int"):
        return int(value)
    if ftype.startswith("float"):
        return float(value)
    return str(value)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    """Build a TrainConfig from a YAML file plus ``key=value`` overrides.

    Unknown keys are rejected with the list of valid keys; overrides apply
    after the file.
    """
    import yaml

    raw: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigKeyError(f"config file {path} must hold a mapping")
        raw.update(loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigKeyError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    kwargs = {k: _coerce(k, v) for k, v in raw.items()}
    return TrainConfig(**kwargs)


def save_config(config: TrainConfig, path: str | Path) -> None:
    import yaml

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    """Loaded dataset splits. Labels of unlabeled entries are withheld."""

    labeled: list[tuple[Volume, LabelVolume]]
    unlabeled: list[Volume]
    test: list[tuple[Volume, LabelVolume]] = field(default_factory=list)
    num_classes: int = 2


def load_split_dataset(data_dir: str | Path, num_classes: int,
                       normalize: bool = True) -> TrainingData:
    """Read a dataset directory written by the synth command.

    Expects ``splits.json`` with name lists under "labeled", "unlabeled" and
    "test"; each name maps to ``<name>.json``/``.bin`` plus a
    ``<name>_label`` pair (not read for unlabeled entries).
    """
    data_dir = Path(data_dir)
    splits = json.loads((data_dir / "splits.json").read_text())

    def _vol(name: str) -> Volume:
        vol = load_volume(data_dir / f"{name}.json")
        return normalize_intensity(vol) if normalize else vol

    def _pair(name: str) -> tuple[Volume, LabelVolume]:
        return _vol(name), load_label_volume(data_dir / f"{name}_label.json", num_classes)

    return TrainingData(
        labeled=[_pair(n) for n in splits.get("labeled", [])],
        unlabeled=[_vol(n) for n in splits.get("unlabeled", [])],
        test=[_pair(n) for n in splits.get("test", [])],
        num_classes=num_classes,
    )


def _random_crop(volume: Volume, label: LabelVolume | None, patch,
                 rng: np.random.Generator, name: str) -> Sample:
    shape = volume.shape
    if any(p > s for p, s in zip(patch, shape)):
        raise PatchLargerThanVolumeError(f"patch {patch} exceeds volume {shape}")
    origin = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, patch)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return Sample(
        image=np.ascontiguousarray(volume.data[sl], dtype=np.float32),
        label=None if label is None else np.ascontiguousarray(label.data[sl]),
        sample_id=f"{name}@{origin[0]},{origin[1]},{origin[2]}",
    )


def sample_batches(data: TrainingData, config: TrainConfig,
                   rng: np.random.Generator) -> tuple[list[Sample], list[Sample]]:
    """Draw one labeled and one unlabeled batch of random crops."""
    patch = config.patch_size
    labeled = []
    for _ in range(config.batch_labeled):
        idx = int(rng.integers(0, len(data.labeled)))
        vol, lab = data.labeled[idx]
        labeled.append(_random_crop(vol, lab, patch, rng, vol.name))
    unlabeled = []
    for _ in range(config.batch_unlabeled):
        idx = int(rng.integers(0, len(data.unlabeled)))
        vol = data.unlabeled[idx]
        unlabeled.append(_random_crop(vol, None, patch, rng, vol.name))
    if config.geometric_aug:
        labeled = [random_flip_rotate(s, rng) for s in labeled]
        unlabeled = [random_flip_rotate(s, rng) for s in unlabeled]
    return labeled, unlabeled


def _images_to_tensor(samples: list[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])[:, None]).float()


def _labels_to_tensor(samples: list[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.label for s in samples])).long()


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    pair: TeacherStudentPair
    optimizer: torch.optim.Optimizer
    data_rng: np.random.Generator
    aug_rng: np.random.Generator
    iteration: int = 0
    loss_stats: dict = field(default_factory=lambda: {"steps": 0, "total_sum": 0.0})


def init_state(config: TrainConfig) -> TrainState:
    """Seed all generators and build a fresh student/teacher pair."""
    config = config.resolved()
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True)
    pair = build_pair(config.backbone_config(), ema_decay=config.ema_decay)
    optimizer = torch.optim.Adam(pair.student.parameters(), lr=config.lr)
    seq = np.random.SeedSequence(config.seed)
    data_seq, aug_seq = seq.spawn(2)
    return TrainState(
        config=config,
        pair=pair,
        optimizer=optimizer,
        data_rng=np.random.default_rng(data_seq),
        aug_rng=np.random.default_rng(aug_seq),
    )


def state_to_checkpoint(state: TrainState) -> dict:
    return {
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "student": state.pair.student.state_dict(),
        "teacher": state.pair.teacher.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "data_rng": state.data_rng.bit_generator.state,
        "aug_rng": state.aug_rng.bit_generator.state,
        "loss_stats": dict(state.loss_stats),
    }


def state_from_checkpoint(payload: dict) -> TrainState:
    config = TrainConfig(**{k: _coerce(k, v) for k, v in payload["config"].items()})
    state = init_state(config)
    state.pair.student.load_state_dict(payload["student"])
    state.pair.teacher.load_state_dict(payload["teacher"])
    state.optimizer.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["torch_rng"])
    state.data_rng.bit_generator.state = payload["data_rng"]
    state.aug_rng.bit_generator.state = payload["aug_rng"]
    state.iteration = int(payload["iteration"])
    state.loss_stats = dict(payload["loss_stats"])
    return state


# ---------------------------------------------------------------------------
# the training step
# ---------------------------------------------------------------------------

def _stream_uq(preds: PredictionSet, mode: str):
    """JUQ, reliability map and refined pseudo-labels of one teacher stream."""
    jq = juq(preds, preds.mean_probs)
    rel = reliability_map(jq, mode)
    return rel, refine_pseudo_labels(preds.mean_probs, rel)


def _tensor_stats(t: torch.Tensor) -> dict:
    t = t.detach()
    finite = torch.isfinite(t)
    safe = t[finite]
    return {
        "shape": list(t.shape),
        "finite_frac": float(finite.float().mean()),
        "min": float(safe.min()) if safe.numel() else None,
        "max": float(safe.max()) if safe.numel() else None,
        "mean": float(safe.mean()) if safe.numel() else None,
    }


def train_step(state: TrainState, labeled: list[Sample], unlabeled: list[Sample],
               dump_dir: str | Path | None = None) -> L.LossReport:
    """One full optimization step; returns the per-component loss report.

    The labeled path runs first and consumes its own augmentation draws, so
    switching the unlabeled plumbing (combination or reliability mode) leaves
    the labeled losses of a given seed bit-identical.
    """
    cfg = state.config
    iteration = state.iteration + 1
    lam = L.ramp_lambda(iteration, cfg.total_iters, cfg.lambda_max)
    student, teacher = state.pair.student, state.pair.teacher
    student.train()
    teacher.eval()
    intermediates: dict[str, torch.Tensor] = {}

    aug_labeled = augment_labeled_batch(labeled, state.aug_rng)
    x_l = _images_to_tensor(aug_labeled)
    y_l = _labels_to_tensor(aug_labeled)
    preds_l, pyramid_l = student(x_l)
    sup = L.supervised_loss(preds_l, y_l, focal_gamma=cfg.focal_gamma)
    intermediates["labeled_mean_probs"] = preds_l.mean_probs

    zero = torch.zeros(())
    l_lc = l_uc1 = l_uc2 = zero
    if not cfg.supervised_only:
        aug_unlabeled = augment_unlabeled_batch(unlabeled, state.aug_rng)
        x_u1 = _images_to_tensor(unlabeled)
        x_u2 = _images_to_tensor(aug_unlabeled)
        feats_l = student.prototype_features(pyramid_l, cfg.patch_size)
        p_l = labeled_prototypes(feats_l, y_l, cfg.num_classes)
        intermediates["labeled_prototype_features"] = feats_l

        if cfg.combination_mode == "concat":
            x_cat = torch.cat([x_u1, x_u2], dim=0)
            with torch.no_grad():
                preds_cat, _ = teacher(x_cat)
                rel, pl = _stream_uq(preds_cat, cfg.reliability_mode)
            _, pyramid_cat = student(x_cat)
            feats_cat = student.prototype_features(pyramid_cat, cfg.patch_size)
            p_u = unlabeled_prototypes(feats_cat, pl.hard, rel.data, cfg.num_classes)
            p_global = fuse_global(p_l, p_u, lam)
            sim_l = similarity_map(p_global, feats_l, cfg.sim_temperature)
            sim_cat = similarity_map(p_global, feats_cat, cfg.sim_temperature)
            l_lc, l_uc1, l_uc2 = L.consistency_losses(
                sim_l, sim_cat, None, None, y_l, pl.refined)
            intermediates["unlabeled_reliability"] = rel.data
        else:
            with torch.no_grad():
                preds_u1, _ = teacher(x_u1)
                preds_u2, _ = teacher(x_u2)
                rel1, pl1 = _stream_uq(preds_u1, cfg.reliability_mode)
                rel2, pl2 = _stream_uq(preds_u2, cfg.reliability_mode)
            # Table V rows 2-4 differ only in which stream's reliability map
            # weights which stream's prototype pooling.
            pool_r1, pool_r2 = {
                "separate_multi_proto": (rel1, rel2),
                "aug_map_on_orig": (rel2, rel2),
                "orig_map_on_aug": (rel1, rel1),
            }[cfg.combination_mode]
            _, pyramid_u1 = student(x_u1)
            _, pyramid_u2 = student(x_u2)
            feats_u1 = student.prototype_features(pyramid_u1, cfg.patch_size)
            feats_u2 = student.prototype_features(pyramid_u2, cfg.patch_size)
            p_u1 = unlabeled_prototypes(feats_u1, pl1.hard, pool_r1.data, cfg.num_classes)
            p_u2 = unlabeled_prototypes(feats_u2, pl2.hard, pool_r2.data, cfg.num_classes)
            fused = fuse_prototypes(p_l, p_u1, p_u2, cfg.lambda1, cfg.lambda2, lam)
            sim_l = similarity_map(fused.global_, feats_l, cfg.sim_temperature)
            sim_u = similarity_map(fused.global_, (feats_u1 + feats_u2) / 2.0, cfg.sim_temperature)
            sim_u1 = similarity_map(fused.global_, feats_u1, cfg.sim_temperature)
            sim_u2 = similarity_map(fused.global_, feats_u2, cfg.sim_temperature)
            l_lc, l_uc1, l_uc2 = L.consistency_losses(
                sim_l, sim_u, sim_u1, sim_u2, y_l, pl2.refined)
            intermediates["orig_reliability"] = rel1.data
            intermediates["aug_reliability"] = rel2.data
            intermediates["aug_refined_pl"] = pl2.refined

    try:
        total = L.total_loss(sup["l_seg"], l_lc, l_uc1, l_uc2, lam)
    except NonFiniteLossError:
        if dump_dir is not None:
            dump = {name: _tensor_stats(t) for name, t in intermediates.items()}
            dump["losses"] = {k: float(v.detach()) for k, v in sup.items()}
            dump["losses"].update({"l_lc": float(l_lc.detach()), "l_uc1": float(l_uc1.detach()),
                                   "l_uc2": float(l_uc2.detach()), "lambda_con": lam})
            path = Path(dump_dir) / f"nonfinite_iter{iteration:06d}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(dump, indent=2))
        raise

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(state.pair)
    state.iteration = iteration
    state.loss_stats["steps"] += 1
    state.loss_stats["total_sum"] += float(total.detach())

    def _f(t: torch.Tensor) -> float:
        return float(t.detach())

    return L.LossReport(
        l_ce=_f(sup["l_ce"]), l_dice=_f(sup["l_dice"]), l_focal=_f(sup["l_focal"]),
        l_iou=_f(sup["l_iou"]), l_fused=_f(sup["l_fused"]), l_seg=_f(sup["l_seg"]),
        l_lc=_f(l_lc), l_uc1=_f(l_uc1), l_uc2=_f(l_uc2),
        lambda_con=lam, total=_f(total),
    )


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def run_training(config: TrainConfig | None = None, data: TrainingData | None = None,
                 resume_from: str | Path | None = None, log_path: str | Path | None = None,
                 quiet: bool = True) -> tuple[Path, Path]:
    """Train to ``total_iters``, logging one JSONL record per iteration and
    checkpointing every ``checkpoint_every`` iterations plus at the end.

    Returns (final checkpoint path, loss log path). Pass ``resume_from`` to
    continue a run; the checkpoint's stored config is used.
    """
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        state = state_from_checkpoint(payload)
    else:
        if config is None:
            raise ValueError("either config or resume_from is required")
        state = init_state(config)
    cfg = state.config
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config_resolved.yaml")
    if data is None:
        if not cfg.data_dir:
            raise ValueError("config.data_dir is empty and no TrainingData was passed")
        data = load_split_dataset(cfg.data_dir, cfg.num_classes)

    if log_path is None:
        suffix = f"_from_{state.iteration:06d}" if state.iteration else ""
        log_path = out_dir / f"train_log{suffix}.jsonl"
    log_path = Path(log_path)
    torch.set_flush_denormal(True)

    start = time.time()
    with log_path.open("w") as log:
        while state.iteration < cfg.total_iters:
            labeled, unlabeled = sample_batches(data, cfg, state.data_rng)
            report = train_step(state, labeled, unlabeled, dump_dir=out_dir)
            record = {"iteration": state.iteration, **report.to_dict()}
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_iter{state.iteration:06d}.pt",
                                state_to_checkpoint(state))
            if not quiet and state.iteration % 50 == 0:
                rate = state.iteration / max(time.time() - start, 1e-9)
                print(f"iter {state.iteration}/{cfg.total_iters} "
                      f"total={report.total:.4f} ({rate:.2f} it/s)", flush=True)

    final_path = out_dir / "ckpt_final.pt"
    save_checkpoint(final_path, state_to_checkpoint(state))
    return final_path, log_path


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def load_model_for_inference(checkpoint: dict | str | Path,
                             role: str = "teacher") -> tuple[SegmentationModel, TrainConfig]:
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    config = TrainConfig(**{k: _coerce(k, v) for k, v in payload["config"].items()})
    model = SegmentationModel(config.backbone_config())
    model.load_state_dict(payload[role])
    model.eval()
    return model, config


def predict(checkpoint: dict | str | Path, volume: Volume,
            patch_size=None, stride=None) -> tuple[LabelVolume, np.ndarray]:
    """Sliding-window inference with the EMA teacher.

    The volume is expected to be intensity-normalized already. Overlapping
    patch probabilities are averaged; labels are the argmax (ties to the
    lowest class index). Returns (labels, (H, W, D, C) probabilities).
    """
    model, cfg = load_model_for_inference(checkpoint)
    patch = tuple(patch_size or cfg.patch_size)
    step = tuple(stride or cfg.stride)
    grid = plan_sliding_window(volume.shape, patch, step)
    patch_probs = []
    with torch.inference_mode():
        for (i, j, k) in grid.origins:
            chunk = volume.data[i:i + patch[0], j:j + patch[1], k:k + patch[2]]
            x = torch.from_numpy(np.ascontiguousarray(chunk, dtype=np.float32))[None, None]
            preds, _ = model(x)
            patch_probs.append(preds.mean_probs[0].permute(1, 2, 3, 0).numpy())
    probs = assemble_prediction(patch_probs, grid, volume.shape)
    labels = np.argmax(probs, axis=-1).astype(np.int16)
    return LabelVolume(data=labels, num_classes=cfg.num_classes), probs
