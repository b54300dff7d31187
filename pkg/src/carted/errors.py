"""Exception and warning types."""


class DimensionError(ValueError):
    """Raised when array shapes are incompatible."""


class NumericalError(ArithmeticError):
    """Raised when a linear system cannot be solved reliably."""


class DivergenceError(RuntimeError):
    """Raised when an iterate becomes non-finite.

    ``report`` carries whatever diagnostics were collected before the abort.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CyclicGraphError(ValueError):
    """Raised when a thresholded contemporaneous graph contains a cycle."""

    def __init__(self, cycle, labels=None):
        names = [str(labels[i]) if labels is not None else str(i) for i in cycle]
        super().__init__("thresholded W has a cycle: " + " -> ".join(names + names[:1]))
        self.cycle = list(cycle)


class DegenerateWarning(RuntimeWarning):
    """Degenerate input handled by a documented fallback."""


class MonotonicityWarning(RuntimeWarning):
    """An augmented Lagrangian increased during an inner ADMM sweep."""
