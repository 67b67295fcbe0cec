"""Exception types raised across the package."""

import numpy as np


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class DimensionError(ValueError):
    """Array shapes or selection indices do not match the ground set."""


class ComplexityError(ValueError):
    """An exhaustive computation would exceed its combinatorial guard."""


class ConfigError(ValueError):
    """An experiment or scenario description is invalid."""


class FactorizationError(np.linalg.LinAlgError):
    """A matrix that must be positive definite failed to factorize.

    ``pivot`` is the 0-based position (within the factorized matrix) of the
    first non-positive leading minor, or ``None`` when unknown.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NumericalError(ArithmeticError):
    """A recursive update produced a non-positive Schur complement."""


class EvaluationError(RuntimeError):
    """Evaluating a set function failed; ``index`` names the candidate."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
