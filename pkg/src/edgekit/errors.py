"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new error conditions should
reuse one of the classes below rather than raising bare ValueErrors.
"""


class EdgekitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(EdgekitError):
    """Operands have incompatible extents."""


class PartitionError(EdgekitError):
    """An image cannot be split evenly (patch grid, window grid, crop)."""


class NumericError(EdgekitError):
    """Non-finite values or a failed numeric check."""


class UsageError(EdgekitError):
    """An API was called in an unsupported way (wrong mode, missing input)."""


class ConfigError(EdgekitError):
    """Invalid or inconsistent configuration value."""


class InputError(EdgekitError):
    """Caller passed structurally invalid data (e.g. an empty annotator stack)."""


class ParseError(EdgekitError):
    """A file could not be parsed; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(EdgekitError):
    """Base class for checkpoint load failures."""


class MagicMismatch(CheckpointError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(CheckpointError):
    """Checkpoint format version is not supported."""


class DigestMismatch(CheckpointError):
    """Stored model-config digest does not match the expected config."""


class TruncatedFile(CheckpointError):
    """File ended before the declared payload was read."""
