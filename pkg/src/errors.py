from __future__ import annotations


class McnetError(Exception):
    """Base class for every failure raised by the lab."""


class ShapeError(McnetError):
    """Raised when tensor extents do not line up for an operation."""


class NonFiniteError(McnetError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class BatchNormStateError(McnetError):
    """Raised when eval-mode batch norm runs before any training step."""


class KernelBankError(McnetError):
    """Raised for malformed kernel banks or a corrupted embedded data file."""


class EmbeddingError(McnetError):
    """Raised when a payload cannot be embedded."""


class CheckpointError(McnetError):
    """Raised for unreadable, truncated or corrupted checkpoint files."""


class ConfigMismatchError(CheckpointError):
    """Raised when a checkpoint was written for a different architecture."""


class ConfigError(McnetError):
    """Raised when a configuration file or value fails validation."""


class DatasetError(McnetError):
    """Raised for bad manifests or corpora too small to split."""


class TrainingError(McnetError):
    """Raised when training diverges or validation produces NaN."""


class MetricError(McnetError):
    """Raised when a detector metric is undefined for the given scores."""
