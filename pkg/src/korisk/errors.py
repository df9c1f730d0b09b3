"""Exception types shared across the package."""


class InputError(ValueError):
    """An argument violates a documented precondition."""


class NumericError(ArithmeticError):
    """A linear solve or iteration produced non-finite or singular results."""


class InfeasibleTargetError(ValueError):
    """A requested target error lies at or below a calibrated floor."""


class ParseError(ValueError):
    """A CSV or config file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
