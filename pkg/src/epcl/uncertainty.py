"""Joint uncertainty quantification for pseudo-labels.

Two per-voxel confidence signals are combined: ensemble disagreement across
the K classifier heads (distributional) and the entropy of the mean
prediction. Their normalized product (JUQ) drives a reliability map that
down-weights unreliable pseudo-label voxels.

All maps are (N, H, W, D) tensors; probability maps are (N, C, H, W, D).
Normalizing sums run over the voxels of each sample independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import NotADistributionError, ShapeMismatchError
from .model import PredictionSet

EPS = 1e-8

UNCERTAINTY_KINDS = ("entropy", "variance", "entropy_norm", "dist_norm", "juq")
RELIABILITY_MODES = ("verbatim_eq6", "minmax")


@dataclass
class UncertaintyMap:
    data: torch.Tensor  # (N, H, W, D), nonnegative
    kind: str

    def __post_init__(self):
        if self.kind not in UNCERTAINTY_KINDS:
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")


@dataclass
class ReliabilityMap:
    data: torch.Tensor  # (N, H, W, D), values in [0, 1]
    mode: str

    def __post_init__(self):
        if self.mode not in RELIABILITY_MODES:
            raise ValueError(f"unknown reliability mode {self.mode!r}")


@dataclass
class PseudoLabel:
    """Raw pseudo-label probabilities, their reliability-refined version and
    the hard argmax map (ties break toward the lowest class index)."""

    probs: torch.Tensor    # (N, C, H, W, D)
    refined: torch.Tensor  # (N, C, H, W, D), sub-stochastic
    hard: torch.Tensor     # (N, H, W, D) long


def _check_probs(probs: torch.Tensor, tol: float = 1e-5) -> None:
    if probs.dim() != 5:
        raise ShapeMismatchError(f"expected (N, C, H, W, D) probabilities, got {tuple(probs.shape)}")
    if probs.min() < -tol:
        raise NotADistributionError(f"negative probability {probs.min().item():.3e}")
    err = (probs.sum(dim=1) - 1.0).abs().max().item()
    if err > tol:
        raise NotADistributionError(f"per-voxel sums off by {err:.3e}")


def _per_sample_sum(data: torch.Tensor) -> torch.Tensor:
    return data.sum(dim=(1, 2, 3), keepdim=True)


def entropy_map(probs: torch.Tensor) -> UncertaintyMap:
    """Per-voxel Shannon entropy -sum_c p ln p (natural log, 0 ln 0 := 0)."""
    _check_probs(probs)
    plogp = torch.special.xlogy(probs, probs.clamp_min(0))
    return UncertaintyMap(data=-plogp.sum(dim=1), kind="entropy")


def dist_uncertainty_norm(pred: PredictionSet) -> UncertaintyMap:
    """Normalized distributional confidence exp(-Var_p / sum_p Var_p).

    Var_p is the variance of the K head probabilities at voxel p, computed
    per class and averaged over classes.
    """
    if pred.num_heads < 2:
        raise ValueError("distributional uncertainty needs at least 2 heads")
    var = pred.head_probs.var(dim=0, unbiased=False).mean(dim=1)  # (N, H, W, D)
    out = torch.exp(-var / (_per_sample_sum(var) + EPS))
    return UncertaintyMap(data=out, kind="dist_norm")


def entropy_norm(e: UncertaintyMap) -> UncertaintyMap:
    """Normalized entropy confidence 1 - U_p / sum_p U_p (all ones if sum is 0)."""
    if e.kind != "entropy":
        raise ValueError(f"expected an entropy map, got kind {e.kind!r}")
    if e.data.min() < 0:
        raise ValueError("entropy map must be nonnegative")
    out = 1.0 - e.data / (_per_sample_sum(e.data) + EPS)
    return UncertaintyMap(data=out, kind="entropy_norm")


def juq(pred: PredictionSet, pl_probs: torch.Tensor) -> UncertaintyMap:
    """Joint uncertainty: the voxelwise product of the distributional and
    entropy confidence maps."""
    dist = dist_uncertainty_norm(pred)
    ent = entropy_norm(entropy_map(pl_probs))
    if dist.data.shape != ent.data.shape:
        raise ShapeMismatchError(
            f"prediction/pseudo-label shapes disagree: {tuple(dist.data.shape)} vs {tuple(ent.data.shape)}"
        )
    return UncertaintyMap(data=dist.data * ent.data, kind="juq")


def reliability_map(j: UncertaintyMap, mode: str = "verbatim_eq6") -> ReliabilityMap:
    """Turn a joint-uncertainty map into per-voxel weights in [0, 1].

    verbatim_eq6: (1 / HWD) * (1 - j_p / sum_p j_p). The leading constant
    uniformly rescales downstream loss magnitudes, so a minmax variant is
    provided: 1 - (j_p - min j) / (max j - min j).
    """
    if j.data.min() < 0:
        raise ValueError("uncertainty map must be nonnegative")
    if mode == "verbatim_eq6":
        n_vox = j.data[0].numel()
        out = (1.0 - j.data / (_per_sample_sum(j.data) + EPS)) / n_vox
    elif mode == "minmax":
        flat = j.data.flatten(1)
        lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
        hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
        out = 1.0 - (j.data - lo) / (hi - lo + EPS)
    else:
        raise ValueError(f"unknown reliability mode {mode!r}")
    return ReliabilityMap(data=out, mode=mode)


def refine_pseudo_labels(pl_probs: torch.Tensor, r: ReliabilityMap) -> PseudoLabel:
    """Weight raw pseudo-label probabilities by the reliability map.

    refined = r * probs broadcast over classes; the hard map is the argmax of
    refined (equivalently of probs wherever r > 0, since r is class-uniform).
    """
    _check_probs(pl_probs)
    if pl_probs.shape[0] != r.data.shape[0] or pl_probs.shape[2:] != r.data.shape[1:]:
        raise ShapeMismatchError(
            f"probs {tuple(pl_probs.shape)} vs reliability {tuple(r.data.shape)}"
        )
    refined = pl_probs * r.data.unsqueeze(1)
    hard = torch.argmax(refined, dim=1)
    return PseudoLabel(probs=pl_probs, refined=refined, hard=hard)


def export_reliability_slices(r: ReliabilityMap | np.ndarray, axis: int, out_dir: str | Path,
                              prefix: str = "slice") -> list[Path]:
    """Write one grayscale PNG per slice along ``axis``.

    Intensities are normalized to [0, 255] per volume (not per slice) so
    slices stay comparable within one export.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = r.data if isinstance(r, ReliabilityMap) else r
    if isinstance(data, torch.Tensor):
        data = data.detach().cpu().numpy()
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ShapeMismatchError("export expects a single volume")
        data = data[0]
    if not 0 <= axis <= 2:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    lo, hi = float(data.min()), float(data.max())
    scaled = np.zeros_like(data, dtype=np.float64) if hi == lo else (data - lo) / (hi - lo)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in range(data.shape[axis]):
        sl = np.take(scaled, idx, axis=axis)
        path = out_dir / f"{prefix}_{idx:03d}.png"
        plt.imsave(path, sl, cmap="gray", vmin=0.0, vmax=1.0)
        paths.append(path)
    return paths
