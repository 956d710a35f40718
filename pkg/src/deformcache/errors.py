"""Exception types shared across the package."""


class DeformCacheError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DeformCacheError, ValueError):
    """Inconsistent shapes, invalid settings or malformed config files.

    ``field`` holds the dotted config path when the error came from a config
    file, so callers can point the user at the offending entry.
    """

    def __init__(self, message, field=None):
        self.field = field
        self.message = message
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class RejectedInputError(DeformCacheError, ValueError):
    """Input data that violates an operation's precondition (NaN, empty...)."""


class ContractViolation(DeformCacheError, ValueError):
    """An argument outside the range the routine is specified for."""


class QuantOverflowError(DeformCacheError, OverflowError):
    """Accumulator overflow on a non-saturating fixed-point format."""

    def __init__(self, stage, limit):
        self.stage = stage
        self.limit = limit
        super().__init__(f"accumulator overflow in stage '{stage}' (|value| > {limit})")


class DataCorruptionError(DeformCacheError, LookupError):
    """An id that does not belong to the batch it claims to come from."""
