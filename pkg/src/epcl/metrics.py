"""Segmentation quality metrics: Dice, Jaccard, 95% Hausdorff distance and
average symmetric surface distance.

Surface voxels are foreground voxels with at least one six-connected
background or out-of-bounds neighbor. Distances are Euclidean, scaled by the
voxel spacing; the 95th percentile uses linear interpolation over the sorted
directed distances. Multi-class volumes are scored one-vs-rest per foreground
class and macro-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, ShapeMismatchError

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass
class MetricReport:
    """Metrics for one (volume, class) pair.

    dice/jaccard are fractions in [0, 1]; hd95/asd are distances in mm.
    surface_defined is False when either mask was empty, in which case hd95
    and asd hold NaN sentinels rather than silent zeros.
    """

    dice: float
    jaccard: float
    hd95: float
    asd: float
    surface_defined: bool = True


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Dice and Jaccard of two binary masks (1.0, 1.0 when both are empty)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    inter = np.logical_and(pred, gt).sum()
    size_sum = pred.sum() + gt.sum()
    if size_sum == 0:
        return 1.0, 1.0
    union = size_sum - inter
    dice = 2.0 * inter / size_sum
    jaccard = inter / union if union > 0 else 1.0
    return float(dice), float(jaccard)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of surface voxels (six-connectivity interior test;
    out-of-bounds counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=SIX_CONNECTED, border_value=0)
    return mask & ~interior


def surface_metrics(pred: np.ndarray, gt: np.ndarray,
                    spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """95% Hausdorff distance and average symmetric surface distance.

    Directed distances run from each surface voxel of one mask to the nearest
    surface voxel of the other; hd95 is the max of the two directed 95th
    percentiles and asd the mean over all distances in both directions.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    if not pred.any() or not gt.any():
        raise EmptyMaskError("surface metrics are undefined for empty masks")
    surf_pred = boundary_voxels(pred)
    surf_gt = boundary_voxels(gt)
    # distance of every voxel to the nearest surface voxel of the other mask
    dist_to_gt = ndimage.distance_transform_edt(~surf_gt, sampling=spacing)
    dist_to_pred = ndimage.distance_transform_edt(~surf_pred, sampling=spacing)
    d_pg = dist_to_gt[surf_pred]
    d_gp = dist_to_pred[surf_gt]
    hd95 = max(float(np.percentile(d_pg, 95)), float(np.percentile(d_gp, 95)))
    asd = float((d_pg.sum() + d_gp.sum()) / (d_pg.size + d_gp.size))
    return hd95, asd


def evaluate_class(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    """All four metrics for one binary mask pair; NaN surface sentinels when
    either mask is empty."""
    dice, jaccard = overlap_metrics(pred, gt)
    try:
        hd95, asd = surface_metrics(pred, gt, spacing)
        return MetricReport(dice=dice, jaccard=jaccard, hd95=hd95, asd=asd)
    except EmptyMaskError:
        return MetricReport(dice=dice, jaccard=jaccard, hd95=float("nan"),
                            asd=float("nan"), surface_defined=False)


def evaluate_segmentation(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int,
                          spacing=(1.0, 1.0, 1.0)) -> dict[int, MetricReport]:
    """One-vs-rest metrics per foreground class (1..C-1)."""
    if pred_labels.shape != gt_labels.shape:
        raise ShapeMismatchError(f"pred {pred_labels.shape} vs gt {gt_labels.shape}")
    return {
        c: evaluate_class(pred_labels == c, gt_labels == c, spacing)
        for c in range(1, num_classes)
    }


def macro_average(reports: list[MetricReport]) -> MetricReport:
    """Average metrics across reports; surface terms skip NaN sentinels."""
    if not reports:
        raise ValueError("nothing to average")
    dice = float(np.mean([r.dice for r in reports]))
    jaccard = float(np.mean([r.jaccard for r in reports]))
    surface = [r for r in reports if r.surface_defined]
    if surface:
        hd95 = float(np.mean([r.hd95 for r in surface]))
        asd = float(np.mean([r.asd for r in surface]))
        return MetricReport(dice=dice, jaccard=jaccard, hd95=hd95, asd=asd)
    return MetricReport(dice=dice, jaccard=jaccard, hd95=float("nan"), asd=float("nan"),
                        surface_defined=False)
