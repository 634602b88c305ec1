"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes: config problems -> 1,
data/format problems -> 2, numerical failures -> 3.
"""


class MshnetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MshnetError):
    """Invalid or incomplete run configuration."""


class DataError(MshnetError):
    """Dataset or episode content violates a documented contract."""


class FormatError(DataError):
    """A binary or text artifact file is malformed."""


class NumericalError(MshnetError):
    """A numerical invariant failed (NaN, range violation, gradient check)."""


class ShapeError(MshnetError):
    """Tensor shapes are incompatible with the requested operation."""


class StateError(MshnetError):
    """An object was used in an order its lifecycle forbids."""


class UsageError(MshnetError):
    """An operation was called with arguments that make no sense."""
