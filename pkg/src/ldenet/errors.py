"""Exception types shared across the package."""

from .autodiff.tensor import NonFiniteError, ShapeError


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class DataError(ValueError):
    """Unreadable, malformed or inconsistent image data."""


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss or gradient.

    ``checkpoint`` holds the last state whose loss was finite.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


__all__ = ["CheckpointError", "ConfigError", "DataError", "NonFiniteError", "ShapeError", "TrainingAborted"]
