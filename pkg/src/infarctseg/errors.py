"""Exception hierarchy shared by every module."""


class SegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SegError, ValueError):
    """Inconsistent shapes, unknown model kinds, invalid hyper-parameters."""


class DomainError(SegError, ValueError):
    """Input outside an operation's mathematical domain (empty sets, zero sizes)."""


class DataError(SegError, ValueError):
    """Malformed or unreadable data: bad label values, mismatched extents, I/O."""


class TrainingDiverged(SegError, RuntimeError):
    """Raised when a loss or gradient becomes non-finite during training."""
