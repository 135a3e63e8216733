"""Exception types shared across the package."""


class EpclError(Exception):
    """Base class for all package-specific errors."""


class UnreadableFileError(EpclError):
    """File is missing, truncated, or cannot be parsed."""


class ShapeMismatchError(EpclError):
    """Array shapes disagree with each other or with a header."""


class NonFiniteDataError(EpclError):
    """Loaded or computed data contains NaN or Inf."""


class PatchLargerThanVolumeError(EpclError):
    """Requested patch exceeds the volume along at least one axis."""


class CountMismatchError(EpclError):
    """Number of supplied items does not match the expected count."""


class LabelArityMismatchError(EpclError):
    """Label mixing requested but only one of the two samples is labeled."""


class OddBatchError(EpclError):
    """Labeled augmentation requires an even batch size."""


class BadSpatialSizeError(EpclError):
    """Input spatial size is not divisible by the backbone's downsampling factor."""


class NotADistributionError(EpclError):
    """Per-voxel values are not a valid probability distribution."""


class NoValidPrototypesError(EpclError):
    """Similarity map requested but no class has a valid prototype."""


class NonFiniteLossError(EpclError):
    """A loss value became NaN or Inf during training."""


class EmptyMaskError(EpclError):
    """Surface metrics are undefined for an empty mask."""


class CheckpointFormatError(EpclError):
    """Checkpoint file is missing the expected magic string or version."""


class ConfigKeyError(EpclError):
    """Unknown configuration key supplied."""


class ConstantVolumeWarning(UserWarning):
    """Normalization hit a zero-variance volume; output replaced by zeros."""
