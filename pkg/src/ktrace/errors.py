"""Exception types shared across the package.

Each maps to a distinct nonzero exit code in the CLI, so callers can tell
a bad config from bad data from a bad checkpoint.
"""


class KTraceError(Exception):
    """Base class for all package errors."""


class ShapeError(KTraceError):
    """Tensor dimensions do not line up for the requested operation."""


class MaskError(KTraceError):
    """A mask left no valid positions where at least one is required."""


class DataFormatError(KTraceError):
    """A data file violates the expected schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ColdStartError(KTraceError):
    """Prediction requested for a user with no history; use the prior."""


class CheckpointError(KTraceError):
    """A checkpoint file is unreadable, truncated, or from another version."""


class ConfigError(KTraceError):
    """A run configuration is malformed or incomplete."""


class DivergenceError(KTraceError):
    """Training produced a non-finite loss or gradient."""
