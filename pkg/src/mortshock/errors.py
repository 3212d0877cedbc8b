"""Exception hierarchy shared by every stage of the engine."""


class MortShockError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MortShockError, ValueError):
    """Input data or configuration violates a precondition."""


class ParseError(ValidationError):
    """A data file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingArtifactError(ValidationError):
    """A pipeline stage needs an artifact that an earlier stage writes."""


class NumericalError(MortShockError, ArithmeticError):
    """A computation diverged, overflowed or produced a non-finite value."""


class ConvergenceError(NumericalError):
    """An iterative fit stopped at its iteration cap."""

    def __init__(self, message, gradient_norm=None, iterations=None):
        self.gradient_norm = gradient_norm
        self.iterations = iterations
        super().__init__(message)
