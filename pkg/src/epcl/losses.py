"""Training objectives: the four-part supervised loss with fused cross
entropy, prototype consistency losses, the Gaussian ramp schedule and the
total loss.

All losses consume probability maps (N, C, H, W, D) and either hard integer
targets (N, H, W, D) or soft target maps (N, C, H, W, D). Soft targets may be
sub-stochastic: reliability-weighted pseudo-labels act as importance weights
and are deliberately not renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import NonFiniteLossError, ShapeMismatchError
from .model import PredictionSet
from .prototypes import SimilarityMap

CE_EPS = 1e-8
SMOOTH_EPS = 1e-5


@dataclass
class LossReport:
    """Scalar loss components of one training step."""

    l_ce: float
    l_dice: float
    l_focal: float
    l_iou: float
    l_fused: float
    l_seg: float
    l_lc: float
    l_uc1: float
    l_uc2: float
    lambda_con: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def _as_soft_target(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """One-hot encode hard targets; pass soft maps through after shape checks."""
    if target.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8) and target.dim() == probs.dim() - 1:
        if target.shape != probs.shape[:1] + probs.shape[2:]:
            raise ShapeMismatchError(f"target {tuple(target.shape)} vs probs {tuple(probs.shape)}")
        return F.one_hot(target.long(), num_classes=probs.shape[1]).movedim(-1, 1).to(probs.dtype)
    if target.shape != probs.shape:
        raise ShapeMismatchError(f"target {tuple(target.shape)} vs probs {tuple(probs.shape)}")
    return target.to(probs.dtype)


def ce_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross entropy: mean over voxels of -sum_c t_c ln(p_c + eps)."""
    t = _as_soft_target(target, probs)
    return -(t * (probs + CE_EPS).log()).sum(dim=1).mean()


def dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice: 1 - mean_c (2 sum p t + eps) / (sum p + sum t + eps)."""
    t = _as_soft_target(target, probs)
    dims = (0, 2, 3, 4)
    inter = (probs * t).sum(dim=dims)
    denom = probs.sum(dim=dims) + t.sum(dim=dims)
    return 1.0 - ((2.0 * inter + SMOOTH_EPS) / (denom + SMOOTH_EPS)).mean()


def focal_loss(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss: mean over voxels of -sum_c t_c (1 - p_c)^gamma ln(p_c + eps).

    gamma = 0 collapses to the cross entropy.
    """
    t = _as_soft_target(target, probs)
    weight = (1.0 - probs) ** gamma if gamma != 0 else torch.ones_like(probs)
    return -(t * weight * (probs + CE_EPS).log()).sum(dim=1).mean()


def iou_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft IoU: 1 - mean_c (sum p t + eps) / (sum p + sum t - sum p t + eps)."""
    t = _as_soft_target(target, probs)
    dims = (0, 2, 3, 4)
    inter = (probs * t).sum(dim=dims)
    union = probs.sum(dim=dims) + t.sum(dim=dims) - inter
    return 1.0 - ((inter + SMOOTH_EPS) / (union + SMOOTH_EPS)).mean()


def supervised_loss(preds: PredictionSet, labels: torch.Tensor,
                    focal_gamma: float = 2.0) -> dict[str, torch.Tensor]:
    """Four-part supervised loss on the labeled stream.

    Each classifier head gets its own loss (ce, dice, focal, iou in head
    order); the fused term is the cross entropy of the mean prediction, and
    l_seg = (l_ce + l_dice + l_focal + l_iou) / 4 + l_fused.
    """
    if preds.num_heads != 4:
        raise ValueError(f"supervised loss expects 4 heads, got {preds.num_heads}")
    l_ce = ce_loss(preds.head_probs[0], labels)
    l_dice = dice_loss(preds.head_probs[1], labels)
    l_focal = focal_loss(preds.head_probs[2], labels, gamma=focal_gamma)
    l_iou = iou_loss(preds.head_probs[3], labels)
    l_fused = ce_loss(preds.mean_probs, labels)
    l_seg = (l_ce + l_dice + l_focal + l_iou) / 4.0 + l_fused
    return {"l_ce": l_ce, "l_dice": l_dice, "l_focal": l_focal, "l_iou": l_iou,
            "l_fused": l_fused, "l_seg": l_seg}


def consistency_losses(sim_l: SimilarityMap, sim_u: SimilarityMap | None,
                       sim_u1: SimilarityMap | None, sim_u2: SimilarityMap | None,
                       labels: torch.Tensor, refined_pl: torch.Tensor | None,
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Prototype consistency terms.

    l_lc ties the labeled similarity likelihoods to the ground-truth labels;
    l_uc1 ties the averaged-feature unlabeled map and l_uc2 the two per-stream
    maps to the refined pseudo-labels of the augmented stream.
    """
    l_lc = ce_loss(sim_l.probs, labels)
    zero = torch.zeros((), dtype=sim_l.probs.dtype)
    l_uc1 = ce_loss(sim_u.probs, refined_pl) if sim_u is not None else zero
    l_uc2 = zero
    if sim_u1 is not None and sim_u2 is not None:
        l_uc2 = ce_loss(sim_u1.probs, refined_pl) + ce_loss(sim_u2.probs, refined_pl)
    return l_lc, l_uc1, l_uc2


def ramp_lambda(iteration: int, total_iters: int, lambda_max: float = 1.0) -> float:
    """Time-dependent Gaussian warm-up: lambda_max * exp(-5 (1 - t/T)^2).

    Rises from lambda_max * exp(-5) at t=0 to lambda_max at t=T.
    """
    if total_iters <= 0:
        return lambda_max
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    phase = 1.0 - iteration / total_iters
    value = lambda_max * math.exp(-5.0 * phase * phase)
    return min(max(value, 0.0), lambda_max)


def total_loss(l_seg: torch.Tensor, l_lc: torch.Tensor, l_uc1: torch.Tensor,
               l_uc2: torch.Tensor, lambda_con: float) -> torch.Tensor:
    """Total objective: l_seg + l_lc + lambda_con * (l_uc1 + l_uc2)."""
    total = l_seg + l_lc + lambda_con * (l_uc1 + l_uc2)
    if not torch.isfinite(total):
        parts = {name: float(t.detach()) for name, t in
                 (("l_seg", l_seg), ("l_lc", l_lc), ("l_uc1", l_uc1), ("l_uc2", l_uc2))}
        raise NonFiniteLossError(f"non-finite total loss ({parts}, lambda_con={lambda_con})")
    return total
