"""Shared exception types."""


class PinfError(Exception):
    """Base class for all library errors."""


class DimensionError(PinfError):
    """Operand shapes do not conform to an operation's contract."""


class NonFiniteError(PinfError):
    """A public operation produced NaN or Inf."""


class UsageError(PinfError):
    """An API was called outside its contract (wrong mode, wrong node, ...)."""


class InputError(PinfError):
    """A user-supplied record is invalid (out of bounds, malformed, ...)."""


class FormatError(PinfError):
    """A file does not conform to its declared on-disk format."""


class ChecksumError(FormatError):
    """A file failed its integrity check; no partial state was loaded."""


class ContractError(PinfError):
    """An internal invariant was violated (e.g. gradient for a frozen group)."""


class TrainingDiverged(PinfError):
    """Training aborted on a non-finite loss."""


class ConfigError(PinfError):
    """A run configuration is missing, unknown, or inconsistent."""
