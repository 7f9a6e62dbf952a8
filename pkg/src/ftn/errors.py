"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot proceed (non-finite values,
    rank collapse, failed line search)."""


class DegenerateStepError(NumericalError):
    """A retraction step collapsed the rank of some node (zero diagonal in R)."""


class LineSearchError(NumericalError):
    """No acceptable step length within the halving budget."""
