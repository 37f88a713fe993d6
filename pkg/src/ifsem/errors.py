"""Exception types raised by ifsem."""


class IfsemError(Exception):
    """Base class for all package errors."""


class DimensionError(IfsemError, ValueError):
    """Raised when point, matrix or model dimensions disagree."""


class CapacityError(IfsemError, ValueError):
    """Raised when a code table would exceed the configured row limit."""


class ParseError(IfsemError, ValueError):
    """Raised on malformed CSV or JSON input.

    Parameters
    ----------
    message : str
        Description of the problem.
    line : int, optional
        1-based line number in the offending file.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
