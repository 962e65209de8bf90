"""Exception types shared across the package."""


class PlotFormatError(ValueError):
    """Raised when plot data (file or in-memory) is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(ArithmeticError):
    """Raised on non-finite values during fitting, training or inference."""
