"""Exception types raised across the package."""


class FLFTError(Exception):
    """Base class for errors raised by this package."""


class CooFormatError(FLFTError, ValueError):
    """A COO text source could not be parsed or violates tensor invariants."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(FLFTError, ValueError):
    """Indices or arrays do not agree with the expected tensor shape."""


class DivergenceError(FLFTError, ArithmeticError):
    """A parameter update produced a non-finite value."""
