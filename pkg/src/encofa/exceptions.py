class EncofaError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(EncofaError):
    """Invalid or inconsistent configuration."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(EncofaError):
    """Missing, malformed or unusable input data."""


class StateError(EncofaError):
    """An operation was called in the wrong lifecycle state."""
