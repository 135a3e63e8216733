"""CutMix-style copy-paste and light geometric augmentation for 3D patches.

All randomness flows through an explicit ``numpy.random.Generator`` so the
whole augmentation pipeline is bit-reproducible under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelArityMismatchError, OddBatchError, ShapeMismatchError

# cut box per-axis extent as a fraction of the patch axis
CUT_FRACTION_LOW = 0.25
CUT_FRACTION_HIGH = 0.5


@dataclass
class Sample:
    """An image patch with an optional integer label map."""

    image: np.ndarray
    label: np.ndarray | None = None
    sample_id: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.image.shape


@dataclass(frozen=True)
class CutMask:
    """Binary cuboid mask: 1 inside the cut box, 0 outside."""

    data: np.ndarray
    box: tuple[tuple[int, int, int], tuple[int, int, int]]  # (origin, extent)


@dataclass
class AugmentedSample(Sample):
    """A CutMix result; provenance records (source_a id, source_b id, mask)."""

    provenance: tuple[str, str, CutMask] | None = None


def generate_cut_mask(patch_size, rng: np.random.Generator) -> CutMask:
    """Draw a random cut cuboid inside a patch.

    Extent per axis is uniform in [0.25, 0.5] of the axis length, floored to
    at least one voxel; the origin is uniform over all valid placements.
    """
    patch_size = tuple(int(s) for s in patch_size)
    if min(patch_size) < 4:
        raise ValueError(f"patch axes must be >= 4, got {patch_size}")
    extent = tuple(
        max(1, int(np.floor(rng.uniform(CUT_FRACTION_LOW * s, CUT_FRACTION_HIGH * s))))
        for s in patch_size
    )
    origin = tuple(int(rng.integers(0, s - e + 1)) for s, e in zip(patch_size, extent))
    data = np.zeros(patch_size, dtype=np.uint8)
    data[origin[0]:origin[0] + extent[0],
         origin[1]:origin[1] + extent[1],
         origin[2]:origin[2] + extent[2]] = 1
    return CutMask(data=data, box=(origin, extent))


def cutmix(a: Sample, b: Sample, mask: CutMask, mix_labels: bool | None = None) -> AugmentedSample:
    """Paste the masked region of ``b`` into ``a``.

    Output image is ``a`` outside the box and ``b`` inside, voxel-exact.
    Labels are mixed with the same mask when both samples carry one
    (``mix_labels=None`` auto-detects; ``True`` makes missing labels an error).
    """
    if a.image.shape != b.image.shape or a.image.shape != mask.data.shape:
        raise ShapeMismatchError(
            f"cutmix shapes disagree: {a.image.shape}, {b.image.shape}, {mask.data.shape}"
        )
    if mix_labels is None:
        mix_labels = a.label is not None and b.label is not None
    if mix_labels and (a.label is None) != (b.label is None):
        raise LabelArityMismatchError("label mixing requested but only one sample is labeled")
    m = mask.data.astype(bool)
    image = np.where(m, b.image, a.image)
    label = None
    if mix_labels and a.label is not None and b.label is not None:
        label = np.where(m, b.label, a.label)
    return AugmentedSample(
        image=image.astype(a.image.dtype),
        label=None if label is None else label.astype(a.label.dtype),
        sample_id=f"{a.sample_id}+{b.sample_id}",
        provenance=(a.sample_id, b.sample_id, mask),
    )


def augment_labeled_batch(batch: list[Sample], rng: np.random.Generator) -> list[Sample]:
    """Extend a labeled batch of size B to 3B/2 samples.

    The originals come first, followed by B/2 CutMix samples formed from
    consecutive pairs (labels mixed with the same masks).
    """
    n = len(batch)
    if n < 2 or n % 2 != 0:
        raise OddBatchError(f"labeled batch size must be even and >= 2, got {n}")
    out: list[Sample] = list(batch)
    for i in range(0, n, 2):
        mask = generate_cut_mask(batch[i].image.shape, rng)
        out.append(cutmix(batch[i], batch[i + 1], mask, mix_labels=True))
    return out


def augment_unlabeled_batch(batch: list[Sample], rng: np.random.Generator) -> list[Sample]:
    """Produce B augmented unlabeled samples by ring-pairing the batch.

    Sample i is image-mixed with sample (i+1) mod B under a fresh mask; any
    pseudo-labels are regenerated downstream rather than mixed here.
    """
    n = len(batch)
    if n < 2:
        raise ValueError(f"unlabeled batch size must be >= 2, got {n}")
    out = []
    for i in range(n):
        mask = generate_cut_mask(batch[i].image.shape, rng)
        out.append(cutmix(batch[i], batch[(i + 1) % n], mask, mix_labels=False))
    return out


def random_flip_rotate(s: Sample, rng: np.random.Generator) -> Sample:
    """Apply independent axis flips (p=0.5 each) and a k*90 degree rotation
    in the H-W plane; the label map gets the identical transform."""
    image = s.image
    label = s.label
    for axis in range(3):
        if rng.random() < 0.5:
            image = np.flip(image, axis=axis)
            if label is not None:
                label = np.flip(label, axis=axis)
    k = int(rng.integers(0, 4))
    image = np.rot90(image, k=k, axes=(0, 1))
    if label is not None:
        label = np.rot90(label, k=k, axes=(0, 1))
    return Sample(image=np.ascontiguousarray(image),
                  label=None if label is None else np.ascontiguousarray(label),
                  sample_id=s.sample_id)
