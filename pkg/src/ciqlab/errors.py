class CiqError(Exception):
    """Base class for errors raised by ciqlab."""


class ConfigError(CiqError, ValueError):
    pass


class ShapeError(CiqError, ValueError):
    pass


class TrainingError(CiqError, RuntimeError):
    pass


class UsageError(CiqError, RuntimeError):
    """An operation was called in a state where it is not defined."""
