"""Exception hierarchy shared by every cetnet module."""


class CetnetError(Exception):
    """Base class for all library errors."""


class DimensionError(CetnetError, ValueError):
    """A tensor shape does not satisfy an operation's contract."""


class ConfigurationError(CetnetError, ValueError):
    """A hyper-parameter or model configuration is invalid."""


class UsageError(CetnetError, RuntimeError):
    """An API was called in an invalid order or with invalid arguments."""


class NumericError(CetnetError, ArithmeticError):
    """A non-finite value was encountered."""


class PatternParseError(ConfigurationError):
    """A C/T pattern string could not be parsed.

    ``position`` is the 1-based slot index of the first offending symbol.
    """

    def __init__(self, message, position):
        super().__init__(message)
        self.position = position


class FormatError(CetnetError, ValueError):
    """A binary file (checkpoint or dataset) is malformed.

    ``offset`` is the byte offset at which the problem was detected.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
