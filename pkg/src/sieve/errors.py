"""Shared exception types."""


class SieveError(Exception):
    """Base class for all domain errors."""


class ConfigurationError(SieveError):
    """Invalid configuration value or combination."""


class ShapeError(SieveError):
    """Array or region dimensions violate a contract."""


class CapacityError(SieveError):
    """Sequence exceeds the model's maximum length."""


class NumericError(SieveError):
    """Non-finite values where finite ones are required."""


class FormatError(SieveError):
    """Malformed persisted file; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
