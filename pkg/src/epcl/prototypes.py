"""Class prototypes via masked average pooling, prototype fusion and
prototype-to-feature cosine similarity maps.

Prototype feature maps are (N, C, H, W, D) where the channel count equals the
number of classes (the prototype head's output width), so each prototype is a
C-dimensional vector. A class absent from every sample in a batch yields an
invalid (zero) prototype which is skipped during fusion and forced to
similarity -1 before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NoValidPrototypesError, ShapeMismatchError

EPS = 1e-8


@dataclass
class ClassPrototype:
    """One feature vector per class plus a per-class validity flag."""

    vectors: torch.Tensor  # (num_classes, feat_dim)
    valid: torch.Tensor    # (num_classes,) bool

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


@dataclass
class FusedPrototypes:
    """Fusion products: the combined unlabeled prototype and the global one."""

    unlabeled: ClassPrototype
    global_: ClassPrototype
    lambda1: float
    lambda2: float
    lambda_con: float


@dataclass
class SimilarityMap:
    """Voxel-to-prototype cosine similarities and their softmax likelihoods."""

    data: torch.Tensor   # (N, C, H, W, D) in [-1, 1]
    probs: torch.Tensor  # (N, C, H, W, D), sums to 1 over classes


def masked_average_pool(features: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Mean feature vector over mask-true voxels of one sample.

    features: (feat_dim, H, W, D); mask: (H, W, D) bool. An empty mask yields
    (zero vector, False).
    """
    if features.shape[1:] != mask.shape:
        raise ShapeMismatchError(f"features {tuple(features.shape)} vs mask {tuple(mask.shape)}")
    mask = mask.to(features.dtype)
    count = mask.sum()
    if count.item() == 0:
        return torch.zeros(features.shape[0], dtype=features.dtype), False
    vec = (features * mask.unsqueeze(0)).sum(dim=(1, 2, 3)) / count
    return vec, True


def labeled_prototypes(features: torch.Tensor, labels: torch.Tensor,
                       num_classes: int) -> ClassPrototype:
    """Per-class prototypes from a labeled batch.

    For each class the per-sample masked-average-pooled vectors are averaged
    over the samples that actually contain the class; classes absent from
    every sample come back invalid.
    """
    if features.shape[0] != labels.shape[0] or features.shape[2:] != labels.shape[1:]:
        raise ShapeMismatchError(f"features {tuple(features.shape)} vs labels {tuple(labels.shape)}")
    feat_dim = features.shape[1]
    rows, valid = [], torch.zeros(num_classes, dtype=torch.bool)
    for c in range(num_classes):
        per_sample = []
        for a in range(features.shape[0]):
            vec, ok = masked_average_pool(features[a], labels[a] == c)
            if ok:
                per_sample.append(vec)
        if per_sample:
            rows.append(torch.stack(per_sample).mean(dim=0))
            valid[c] = True
        else:
            rows.append(torch.zeros(feat_dim, dtype=features.dtype))
    return ClassPrototype(vectors=torch.stack(rows), valid=valid)


def unlabeled_prototypes(features: torch.Tensor, hard_labels: torch.Tensor,
                         reliability: torch.Tensor, num_classes: int) -> ClassPrototype:
    """Reliability-weighted prototypes from pseudo-labeled samples.

    Per sample and class: sum_p r_p f_p [hard_p = c] / (sum_p r_p [hard_p = c]
    + eps), then averaged over the samples where the class appears.
    """
    if features.shape[0] != hard_labels.shape[0] or features.shape[2:] != hard_labels.shape[1:]:
        raise ShapeMismatchError(
            f"features {tuple(features.shape)} vs pseudo-labels {tuple(hard_labels.shape)}"
        )
    if reliability.shape != hard_labels.shape:
        raise ShapeMismatchError(
            f"reliability {tuple(reliability.shape)} vs pseudo-labels {tuple(hard_labels.shape)}"
        )
    feat_dim = features.shape[1]
    rows, valid = [], torch.zeros(num_classes, dtype=torch.bool)
    for c in range(num_classes):
        per_sample = []
        for a in range(features.shape[0]):
            mask = (hard_labels[a] == c).to(features.dtype)
            if mask.sum().item() == 0:
                continue
            w = reliability[a] * mask
            num = (features[a] * w.unsqueeze(0)).sum(dim=(1, 2, 3))
            per_sample.append(num / (w.sum() + EPS))
        if per_sample:
            rows.append(torch.stack(per_sample).mean(dim=0))
            valid[c] = True
        else:
            rows.append(torch.zeros(feat_dim, dtype=features.dtype))
    return ClassPrototype(vectors=torch.stack(rows), valid=valid)


def fuse_unlabeled(p_u1: ClassPrototype, p_u2: ClassPrototype,
                   lambda1: float, lambda2: float) -> ClassPrototype:
    """Combine original and augmented unlabeled prototypes per class:
    lambda1 * p_u1 + lambda2 * p_u2, falling back to whichever is valid."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("fusion coefficients must be nonnegative")
    rows = []
    valid = p_u1.valid | p_u2.valid
    for c in range(p_u1.num_classes):
        if p_u1.valid[c] and p_u2.valid[c]:
            rows.append(lambda1 * p_u1.vectors[c] + lambda2 * p_u2.vectors[c])
        elif p_u1.valid[c]:
            rows.append(p_u1.vectors[c])
        else:
            rows.append(p_u2.vectors[c])
    return ClassPrototype(vectors=torch.stack(rows), valid=valid)


def fuse_global(p_l: ClassPrototype, p_u: ClassPrototype, lambda_con: float) -> ClassPrototype:
    """Ramp-weighted fusion ((2 - lambda_con) * p_l + lambda_con * p_u) / 2.

    lambda_con = 0 returns the labeled prototypes; lambda_con = 1 the
    arithmetic mean. A class valid on one side only passes through unchanged.
    """
    if not 0.0 <= lambda_con <= 1.0:
        raise ValueError(f"lambda_con must be in [0, 1], got {lambda_con}")
    rows = []
    valid = p_l.valid | p_u.valid
    for c in range(p_l.num_classes):
        if p_l.valid[c] and p_u.valid[c]:
            rows.append(((2.0 - lambda_con) * p_l.vectors[c] + lambda_con * p_u.vectors[c]) / 2.0)
        elif p_l.valid[c]:
            rows.append(p_l.vectors[c])
        else:
            rows.append(p_u.vectors[c])
    return ClassPrototype(vectors=torch.stack(rows), valid=valid)


def fuse_prototypes(p_l: ClassPrototype, p_u1: ClassPrototype, p_u2: ClassPrototype,
                    lambda1: float, lambda2: float, lambda_con: float) -> FusedPrototypes:
    """Two-stage fusion: unlabeled streams first, then labeled vs unlabeled."""
    p_u = fuse_unlabeled(p_u1, p_u2, lambda1, lambda2)
    p_global = fuse_global(p_l, p_u, lambda_con)
    return FusedPrototypes(unlabeled=p_u, global_=p_global,
                           lambda1=lambda1, lambda2=lambda2, lambda_con=lambda_con)


def similarity_map(protos: ClassPrototype, features: torch.Tensor,
                   temperature: float = 1.0) -> SimilarityMap:
    """Cosine similarity between every voxel's feature vector and each class
    prototype, softmaxed over classes into likelihoods.

    Invalid classes get similarity -1 (the minimum) before the softmax. A
    1e-8 guard in the denominator maps zero vectors to similarity 0.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not bool(protos.valid.any()):
        raise NoValidPrototypesError("no class has a valid prototype")
    if features.shape[1] != protos.vectors.shape[1]:
        raise ShapeMismatchError(
            f"feature dim {features.shape[1]} vs prototype dim {protos.vectors.shape[1]}"
        )
    feat_norm = features.pow(2).sum(dim=1, keepdim=True).sqrt()      # (N,1,H,W,D)
    proto_norm = protos.vectors.pow(2).sum(dim=1).sqrt()             # (C,)
    dots = torch.einsum("nfhwd,cf->nchwd", features, protos.vectors)
    denom = feat_norm * proto_norm.view(1, -1, 1, 1, 1) + EPS
    sims = dots / denom
    sims = torch.where(protos.valid.view(1, -1, 1, 1, 1), sims,
                       torch.full((), -1.0, dtype=sims.dtype))
    probs = torch.softmax(sims / temperature, dim=1)
    return SimilarityMap(data=sims, probs=probs)
