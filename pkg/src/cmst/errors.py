"""Exception hierarchy shared across the package."""


class CMSTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CMSTError, ValueError):
    pass


class StateError(CMSTError, RuntimeError):
    pass


class NumericError(CMSTError, ArithmeticError):
    pass


class InputError(CMSTError, ValueError):
    pass


class ConfigError(CMSTError, ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DatasetFormatError(CMSTError, ValueError):
    pass


class HeaderError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class CheckpointError(CMSTError, ValueError):
    pass


class DivergenceError(CMSTError, RuntimeError):
    """Training produced a non-finite or exploding loss.

    ``records`` holds whatever metric records were collected before the abort.
    """

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = list(records or [])
