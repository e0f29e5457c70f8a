"""Exception hierarchy shared across the package."""


class AdvIdsError(Exception):
    """Base class for all package errors."""


class ConfigError(AdvIdsError, ValueError):
    pass


class ParseError(AdvIdsError, ValueError):
    """A line of input could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StructuralError(ParseError):
    """A line has the wrong number of fields."""


class ShapeError(AdvIdsError, ValueError):
    pass


class UsageError(AdvIdsError, RuntimeError):
    pass


class NumericalError(AdvIdsError, ArithmeticError):
    pass
