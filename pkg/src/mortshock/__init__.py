"""Multi-population mortality improvement model with regime-switching shocks."""

from .errors import (
    ConvergenceError,
    MissingArtifactError,
    MortShockError,
    NumericalError,
    ParseError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "MissingArtifactError",
    "MortShockError",
    "NumericalError",
    "ParseError",
    "ValidationError",
    "__version__",
]
