"""Shared exception types, arranged by how the CLI reports them."""


class SyncDistillError(Exception):
    """Base class for all package-specific errors."""


class UsageError(SyncDistillError):
    """Caller violated an API precondition (CLI exit code 1)."""


class ConfigError(SyncDistillError):
    """Invalid configuration value or combination (CLI exit code 1)."""


class ShapeError(SyncDistillError):
    """Tensor shape mismatch; message names both shapes."""


class DomainError(SyncDistillError):
    """Input outside an operation's mathematical domain."""


class DataFormatError(SyncDistillError):
    """Corrupt or unsupported on-disk artifact (CLI exit code 2)."""


class NumericalAbort(SyncDistillError):
    """Non-finite value reached a training loop (CLI exit code 3)."""
