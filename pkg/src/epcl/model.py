"""Encoder-decoder segmentation backbone with four classifier heads, the
low-channel prototype feature network, EMA teacher updates and checkpoints.

Tensor layout is channel-first: images (N, 1, H, W, D), probability maps
(N, C, H, W, D). The decoder pyramid indexes levels 1..depth-1, level 1 being
the deepest (coarsest) decoder stage.
"""

from __future__ import annotations

import copy
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadSpatialSizeError, CheckpointFormatError, ShapeMismatchError

CHECKPOINT_MAGIC = "EPCL1"


@dataclass
class BackboneConfig:
    in_channels: int = 1
    base_filters: int = 16
    depth: int = 4
    num_classes: int = 2
    num_heads: int = 4
    prototype_tap: int = 2

    def __post_init__(self):
        if self.base_filters < 4:
            raise ValueError(f"base_filters must be >= 4, got {self.base_filters}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.num_heads != 4:
            raise ValueError(f"num_heads is fixed at 4, got {self.num_heads}")
        if not 1 <= self.prototype_tap <= self.depth - 1:
            raise ValueError(
                f"prototype_tap must be in [1, {self.depth - 1}], got {self.prototype_tap}"
            )

    def tap_width(self, tap: int | None = None) -> int:
        """Channel count of the requested decoder level."""
        tap = self.prototype_tap if tap is None else tap
        return self.base_filters * 2 ** (self.depth - 1 - tap)


@dataclass
class PredictionSet:
    """Per-head class probabilities plus their arithmetic mean.

    head_probs: (K, N, C, H, W, D); mean_probs: (N, C, H, W, D).
    """

    head_probs: torch.Tensor
    mean_probs: torch.Tensor

    @classmethod
    def from_heads(cls, heads: list[torch.Tensor]) -> "PredictionSet":
        stacked = torch.stack(heads, dim=0)
        return cls(head_probs=stacked, mean_probs=stacked.mean(dim=0))

    @property
    def num_heads(self) -> int:
        return self.head_probs.shape[0]


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.PReLU(out_ch),
    )


class ResidualStage(nn.Module):
    """Two 3x3x3 conv blocks with an additive shortcut (V-Net style)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = _conv_block(in_ch, out_ch)
        self.conv2 = _conv_block(out_ch, out_ch)
        self.shortcut = nn.Conv3d(in_ch, out_ch, kernel_size=1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        y = self.conv2(self.conv1(x))
        return y + self.shortcut(x)


class PrototypeHead(nn.Module):
    """Three 3x3x3 convs squeezing tap features down to one channel per class,
    followed by trilinear upsampling to label resolution."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        mid1 = max(in_channels // 2, num_classes)
        mid2 = max(in_channels // 4, num_classes)
        self.net = nn.Sequential(
            nn.Conv3d(in_channels, mid1, kernel_size=3, padding=1),
            nn.PReLU(mid1),
            nn.Conv3d(mid1, mid2, kernel_size=3, padding=1),
            nn.PReLU(mid2),
            nn.Conv3d(mid2, num_classes, kernel_size=3, padding=1),
        )

    def forward(self, tap_features: torch.Tensor, out_size) -> torch.Tensor:
        y = self.net(tap_features)
        if tuple(y.shape[2:]) != tuple(out_size):
            y = F.interpolate(y, size=tuple(out_size), mode="trilinear", align_corners=False)
        return y


class SegmentationModel(nn.Module):
    """V-Net style encoder-decoder with K=4 classifier heads and a prototype
    feature head tapping a configurable decoder level."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        f, depth = config.base_filters, config.depth

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(depth):
            ch = f * 2 ** level
            self.encoders.append(ResidualStage(config.in_channels if level == 0 else ch, ch))
            if level < depth - 1:
                self.downs.append(nn.Sequential(
                    nn.Conv3d(ch, ch * 2, kernel_size=2, stride=2),
                    nn.InstanceNorm3d(ch * 2, affine=True),
                    nn.PReLU(ch * 2),
                ))

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(depth - 2, -1, -1):
            ch = f * 2 ** level
            self.ups.append(nn.Sequential(
                nn.ConvTranspose3d(ch * 2, ch, kernel_size=2, stride=2),
                nn.InstanceNorm3d(ch, affine=True),
                nn.PReLU(ch),
            ))
            self.decoders.append(ResidualStage(ch * 2, ch))

        self.heads = nn.ModuleList(
            nn.Conv3d(f, config.num_classes, kernel_size=1) for _ in range(config.num_heads)
        )
        self.prototype_net = PrototypeHead(config.tap_width(), config.num_classes)

    def forward(self, x: torch.Tensor) -> tuple[PredictionSet, dict[int, torch.Tensor]]:
        """Run the backbone; returns head probabilities and the decoder pyramid."""
        factor = 2 ** (self.config.depth - 1)
        if any(s % factor != 0 for s in x.shape[2:]):
            raise BadSpatialSizeError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {factor}"
            )
        skips = []
        y = x
        for level in range(self.config.depth):
            y = self.encoders[level](y)
            if level < self.config.depth - 1:
                skips.append(y)
                y = self.downs[level](y)
        pyramid: dict[int, torch.Tensor] = {}
        for stage, (up, dec) in enumerate(zip(self.ups, self.decoders), start=1):
            y = dec(torch.cat([up(y), skips[-stage]], dim=1))
            pyramid[stage] = y
        heads = [torch.softmax(head(y), dim=1) for head in self.heads]
        return PredictionSet.from_heads(heads), pyramid

    def prototype_features(self, pyramid: dict[int, torch.Tensor], out_size) -> torch.Tensor:
        """Map the configured tap level to (N, C, *out_size) prototype features."""
        tap = self.config.prototype_tap
        if tap not in pyramid:
            raise KeyError(f"tap {tap} not in pyramid levels {sorted(pyramid)}")
        return self.prototype_net(pyramid[tap], out_size)


@dataclass
class TeacherStudentPair:
    student: SegmentationModel
    teacher: SegmentationModel
    ema_decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must be in [0, 1], got {self.ema_decay}")


def build_pair(config: BackboneConfig, ema_decay: float = 0.99) -> TeacherStudentPair:
    """Create a student and a teacher clone; the teacher never sees gradients."""
    student = SegmentationModel(config)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherStudentPair(student=student, teacher=teacher, ema_decay=ema_decay)


@torch.no_grad()
def ema_update(pair: TeacherStudentPair) -> None:
    """Teacher params <- d * teacher + (1 - d) * student, elementwise."""
    d = pair.ema_decay
    s_params = dict(pair.student.named_parameters())
    for name, t_param in pair.teacher.named_parameters():
        s_param = s_params.get(name)
        if s_param is None or s_param.shape != t_param.shape:
            raise ShapeMismatchError(f"teacher/student parameter mismatch at {name!r}")
        t_param.mul_(d).add_(s_param, alpha=1.0 - d)


def prototype_path_float_counts(tap_width: int, num_classes: int, tap_shape,
                                label_shape) -> tuple[int, int]:
    """Analytic peak activation floats of the two prototype-feature routes.

    Memory model: the peak is the largest input+output pair co-resident during
    a single op. Route A upsamples the raw tap features to label resolution;
    route B runs the three-conv prototype head at tap resolution and upsamples
    only the C-channel result. Returns (route_b_peak, route_a_peak).
    """
    tap_vox = math.prod(tap_shape)
    label_vox = math.prod(label_shape)
    f, c = tap_width, num_classes
    route_a = f * tap_vox + f * label_vox
    stages_b = [
        f * tap_vox + (f // 2) * tap_vox,
        (f // 2) * tap_vox + (f // 4) * tap_vox,
        (f // 4) * tap_vox + c * tap_vox,
        c * tap_vox + c * label_vox,
    ]
    return max(stages_b), route_a


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Atomically write a versioned checkpoint (temp file + rename)."""
    path = Path(path)
    payload = dict(payload)
    payload["magic"] = CHECKPOINT_MAGIC
    payload.setdefault("format_version", 1)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not an {CHECKPOINT_MAGIC} checkpoint")
    return payload
