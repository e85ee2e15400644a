"""Exception types raised across the package."""


class StableReprError(Exception):
    """Base class for all package errors."""


class ValidationError(StableReprError, ValueError):
    """An input violates a documented precondition (shape, probability, range)."""


class RankDeficiencyError(ValidationError):
    """A basis is not of full column rank in the weighted metric.

    ``column`` is the index of the first column that falls into the span of
    the preceding ones (or ``None`` when it cannot be attributed).
    """

    def __init__(self, msg, column=None):
        super().__init__(msg)
        self.column = column


class NumericalError(StableReprError):
    """A numerical routine failed (non-convergence, blow-up, singular solve)."""


class ConvergenceError(NumericalError):
    """An iterative method did not converge; ``partial`` holds what was computed."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


class SingularIterationMatrixError(NumericalError):
    """The iteration matrix is singular, so no TD fixed point exists."""


class TrainingBlowUpError(NumericalError):
    """Parameters of a learner exceeded the blow-up threshold."""

    def __init__(self, msg, step, history=None):
        super().__init__(msg)
        self.step = step
        self.history = history or []
