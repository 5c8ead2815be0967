"""Exception hierarchy shared by every polypseg module."""


class PolypsegError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(PolypsegError, ValueError):
    """A caller violated a documented precondition."""


class ShapeError(InvalidArgumentError):
    """Tensor shapes are inconsistent with the requested operation."""


class CorruptionError(PolypsegError):
    """Internal structures (graph links, pooling indices) are inconsistent."""


class GraphCorruptionError(CorruptionError):
    """The autodiff graph references a node that no longer exists."""


class NumericError(PolypsegError):
    """A computation produced NaN or Inf where finite values are required."""


class DatasetError(PolypsegError):
    """A dataset directory is malformed (missing files, bad masks)."""


class ManifestError(DatasetError):
    """A split manifest is inconsistent (unknown names, shared patients)."""


class CheckpointFormatError(PolypsegError):
    """A checkpoint file is truncated, mislabelled, or version-incompatible."""


class ConfigError(PolypsegError):
    """A run configuration key is unknown or fails validation."""


class EmptyTargetError(PolypsegError):
    """A saliency target selected zero pixels; callers should fall back to
    the full-polyp-channel objective."""
