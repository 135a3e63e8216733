"""3D volume I/O, normalization, patch planning and synthetic phantom data.

Volumes are (H, W, D) row-major float32 arrays with per-axis spacing in mm.
Two container formats are supported:

* raw+json: ``<name>.json`` header ``{"shape": [H,W,D], "spacing": [x,y,z],
  "dtype": "float32"}`` next to a ``<name>.bin`` little-endian blob. This is
  the canonical fixture format and round-trips bit-exactly.
* NIfTI-1 (``.nii`` / ``.nii.gz``), single-file, via a minimal built-in codec.
"""

from __future__ import annotations

import gzip
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConstantVolumeWarning,
    CountMismatchError,
    NonFiniteDataError,
    NotADistributionError,
    PatchLargerThanVolumeError,
    ShapeMismatchError,
    UnreadableFileError,
)

RAW_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int16": np.dtype("<i2"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
}


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with spacing metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = ""

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatchError(f"volume must be 3D with all dims >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteDataError(f"volume {self.name!r} contains NaN/Inf")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeMismatchError(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Integer class map paired with a Volume. Class 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"label volume must be 3D, got {self.data.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.data.min() < 0 or self.data.max() >= self.num_classes:
            raise ValueError(
                f"label values must lie in [0, {self.num_classes - 1}], "
                f"got range [{self.data.min()}, {self.data.max()}]"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PatchGrid:
    """Sliding-window plan: patch size, stride and the ordered patch origins."""

    patch_size: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]


# ---------------------------------------------------------------------------
# raw+json container
# ---------------------------------------------------------------------------

def _raw_paths(path: Path) -> tuple[Path, Path]:
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_raw(path: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a 3D array as a raw+json container (little-endian blob + header)."""
    header_path, blob_path = _raw_paths(Path(path))
    dtype_name = next((k for k, v in RAW_DTYPES.items() if v == data.dtype.newbyteorder("<")), None)
    if dtype_name is None:
        raise ValueError(f"unsupported dtype for raw container: {data.dtype}")
    header = {
        "shape": [int(s) for s in data.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype_name,
    }
    header_path.write_text(json.dumps(header))
    blob_path.write_bytes(np.ascontiguousarray(data, dtype=RAW_DTYPES[dtype_name]).tobytes())


def load_raw(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a raw+json container back into (array, spacing)."""
    header_path, blob_path = _raw_paths(Path(path))
    if not header_path.exists() or not blob_path.exists():
        raise UnreadableFileError(f"missing raw container part for {path}")
    try:
        header = json.loads(header_path.read_text())
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype = RAW_DTYPES[header["dtype"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UnreadableFileError(f"bad raw header {header_path}: {exc}") from exc
    blob = blob_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(blob) != expected:
        raise ShapeMismatchError(
            f"{blob_path}: header says {shape} ({expected} bytes) but blob has {len(blob)} bytes"
        )
    data = np.frombuffer(blob, dtype=dtype).reshape(shape)
    return data, spacing


# ---------------------------------------------------------------------------
# minimal single-file NIfTI-1 codec
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 8: np.dtype("<i4"),
                 16: np.dtype("<f4"), 64: np.dtype("<f8")}


def save_nifti(path: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a 3D array as a single-file NIfTI-1 image (.nii or .nii.gz)."""
    path = Path(path)
    code = next((c for c, dt in _NIFTI_DTYPES.items() if dt == data.dtype.newbyteorder("<")), None)
    if code is None:
        raise ValueError(f"unsupported dtype for NIfTI: {data.dtype}")
    dtype = _NIFTI_DTYPES[code]
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)                       # sizeof_hdr
    dim = (3,) + data.shape + (1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dim)                    # dim
    struct.pack_into("<h", header, 70, code)                     # datatype
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)       # bitpix
    pixdim = (1.0,) + tuple(float(s) for s in spacing) + (1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<8f", header, 76, *pixdim)                 # pixdim
    struct.pack_into("<f", header, 108, 352.0)                   # vox_offset
    struct.pack_into("<f", header, 112, 1.0)                     # scl_slope
    struct.pack_into("<4s", header, 344, b"n+1\x00")             # magic
    payload = bytes(header) + b"\x00" * 4 + np.asarray(data, dtype=dtype).tobytes(order="F")
    if path.name.endswith(".gz"):
        # mtime pinned so identical volumes produce identical files
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def load_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a single-file NIfTI-1 image back into (array, spacing)."""
    path = Path(path)
    if not path.exists():
        raise UnreadableFileError(f"no such file: {path}")
    raw = path.read_bytes()
    if path.name.endswith(".gz") or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352 or struct.unpack_from("<i", raw, 0)[0] != 348:
        raise UnreadableFileError(f"{path}: not a NIfTI-1 file")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise UnreadableFileError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise UnreadableFileError(f"{path}: expected 3D image, got {dim[0]}D")
    shape = tuple(dim[1:4])
    code = struct.unpack_from("<h", raw, 70)[0]
    if code not in _NIFTI_DTYPES:
        raise UnreadableFileError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = _NIFTI_DTYPES[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    count = int(np.prod(shape))
    blob = raw[vox_offset:vox_offset + count * dtype.itemsize]
    if len(blob) != count * dtype.itemsize:
        raise ShapeMismatchError(f"{path}: truncated NIfTI payload")
    data = np.frombuffer(blob, dtype=dtype).reshape(shape, order="F")
    return data, tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])


# ---------------------------------------------------------------------------
# public volume operations
# ---------------------------------------------------------------------------

def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def load_volume(path: str | Path, fmt: str | None = None) -> Volume:
    """Load a Volume from a raw+json or NIfTI container.

    Format is inferred from the extension unless ``fmt`` ("raw" or "nifti")
    is given. Data is converted to float32; non-finite voxels are rejected.
    """
    path = Path(path)
    if fmt == "nifti" or (fmt is None and _is_nifti(path)):
        data, spacing = load_nifti(path)
        name = path.name[: -len(".nii.gz")] if path.name.endswith(".nii.gz") else path.stem
    else:
        data, spacing = load_raw(path)
        name = _raw_paths(path)[0].stem
    data = np.asarray(data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError(f"{path} contains NaN/Inf voxels")
    return Volume(data=data, spacing=spacing, name=name)


def save_volume(vol: Volume, path: str | Path, fmt: str | None = None) -> None:
    """Save a Volume as raw+json or NIfTI, inferred from the extension."""
    path = Path(path)
    if fmt == "nifti" or (fmt is None and _is_nifti(path)):
        save_nifti(path, vol.data.astype("<f4"), vol.spacing)
    else:
        save_raw(path, vol.data.astype("<f4"), vol.spacing)


def load_label_volume(path: str | Path, num_classes: int, fmt: str | None = None) -> LabelVolume:
    """Load an integer label map stored in either container format."""
    path = Path(path)
    if fmt == "nifti" or (fmt is None and _is_nifti(path)):
        data, _ = load_nifti(path)
    else:
        data, _ = load_raw(path)
    return LabelVolume(data=np.asarray(data, dtype=np.int16), num_classes=num_classes)


def save_label_volume(label: LabelVolume, path: str | Path, fmt: str | None = None,
                      spacing=(1.0, 1.0, 1.0)) -> None:
    path = Path(path)
    data = label.data.astype("<i2")
    if fmt == "nifti" or (fmt is None and _is_nifti(path)):
        save_nifti(path, data, spacing)
    else:
        save_raw(path, data, spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Rescale voxel intensities to zero mean and unit variance.

    A constant volume has no well-defined rescaling: the result is all zeros
    and a ConstantVolumeWarning is emitted.
    """
    data = v.data.astype(np.float32)
    std = float(data.std())
    if std == 0.0:
        warnings.warn(f"volume {v.name!r} is constant; normalized to zeros", ConstantVolumeWarning)
        return Volume(data=np.zeros_like(data), spacing=v.spacing, name=v.name)
    out = (data - float(data.mean())) / std
    return Volume(data=out.astype(np.float32), spacing=v.spacing, name=v.name)


def plan_sliding_window(shape, patch, stride) -> PatchGrid:
    """Plan patch origins so that patches tile the volume with total coverage.

    Origins along each axis are the stride multiples that fit, with a final
    origin clamped to ``shape - patch`` so the last patch touches the border.
    """
    shape, patch, stride = tuple(shape), tuple(patch), tuple(stride)
    if any(p > s for p, s in zip(patch, shape)):
        raise PatchLargerThanVolumeError(f"patch {patch} exceeds volume {shape}")
    if any(s < 1 for s in stride):
        raise ValueError(f"stride must be >= 1 per axis, got {stride}")
    if any(st > p for st, p in zip(stride, patch)):
        # total coverage is unsatisfiable once consecutive patches stop touching
        raise ValueError(f"stride {stride} must not exceed patch {patch} per axis")
    per_axis = []
    for size, p, st in zip(shape, patch, stride):
        last = size - p
        starts = list(range(0, last + 1, st))
        if starts[-1] != last:
            starts.append(last)
        per_axis.append(starts)
    origins = tuple(
        (i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]
    )
    return PatchGrid(patch_size=patch, stride=stride, origins=origins)


def assemble_prediction(patch_probs, grid: PatchGrid, shape) -> np.ndarray:
    """Average overlapping patch probability maps into a full-volume map.

    ``patch_probs`` holds one (h, w, d, C) map per grid origin; every output
    voxel is the arithmetic mean of all patch predictions covering it.
    """
    if len(patch_probs) != len(grid.origins):
        raise CountMismatchError(
            f"got {len(patch_probs)} patch maps for {len(grid.origins)} origins"
        )
    num_classes = patch_probs[0].shape[-1]
    h, w, d = grid.patch_size
    accum = np.zeros(tuple(shape) + (num_classes,), dtype=np.float64)
    count = np.zeros(tuple(shape), dtype=np.int64)
    for probs, (i, j, k) in zip(patch_probs, grid.origins):
        if probs.shape != (h, w, d, num_classes):
            raise ShapeMismatchError(f"patch map shape {probs.shape} != {(h, w, d, num_classes)}")
        sums = probs.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-5:
            raise NotADistributionError("patch probabilities do not sum to 1 per voxel")
        accum[i:i + h, j:j + w, k:k + d] += probs
        count[i:i + h, j:j + w, k:k + d] += 1
    if count.min() == 0:
        raise CountMismatchError("grid does not cover the whole volume")
    return (accum / count[..., None]).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

def _paint_ellipsoid(label: np.ndarray, center, radii, value: int) -> None:
    grids = np.ogrid[tuple(slice(0, s) for s in label.shape)]
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    label[dist <= 1.0] = value


def synth_dataset(n_volumes: int, shape, num_classes: int, seed: int,
                  noise_sigma: float = 0.1) -> list[tuple[Volume, LabelVolume]]:
    """Generate phantom volumes: ellipsoidal blobs over a noisy background.

    Each foreground class gets 1-3 random ellipsoids whose interiors carry a
    class-specific base intensity; Gaussian noise (sigma 0.1) is added on top.
    Parameters are redrawn until the foreground fraction lands in [0.02, 0.4],
    so labels are guaranteed non-degenerate. Deterministic for a given seed.
    """
    shape = tuple(int(s) for s in shape)
    if min(shape) < 16:
        raise ValueError(f"each axis must be >= 16, got {shape}")
    if num_classes not in (2, 3):
        raise ValueError(f"num_classes must be 2 or 3, got {num_classes}")
    rng = np.random.default_rng(seed)
    base_intensity = {0: 0.2}
    for c in range(1, num_classes):
        base_intensity[c] = 0.2 + 0.6 * c / (num_classes - 1)

    out = []
    for idx in range(n_volumes):
        for _ in range(100):
            label = np.zeros(shape, dtype=np.int16)
            for c in range(1, num_classes):
                for _ in range(int(rng.integers(1, 4))):
                    radii = [rng.uniform(0.14, 0.26) * s for s in shape]
                    center = [rng.uniform(r, s - r) for r, s in zip(radii, shape)]
                    _paint_ellipsoid(label, center, radii, c)
            frac = float((label > 0).mean())
            if 0.02 <= frac <= 0.4:
                break
        else:
            raise RuntimeError("could not draw a phantom with foreground fraction in [0.02, 0.4]")
        image = np.empty(shape, dtype=np.float32)
        for c in range(num_classes):
            image[label == c] = base_intensity[c]
        image += rng.normal(0.0, noise_sigma, size=shape).astype(np.float32)
        name = f"phantom_{idx:03d}"
        out.append((
            Volume(data=image, spacing=(1.0, 1.0, 1.0), name=name),
            LabelVolume(data=label, num_classes=num_classes),
        ))
    return out
