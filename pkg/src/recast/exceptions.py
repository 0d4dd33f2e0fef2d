"""Exception hierarchy shared by every recast module."""


class RecastError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RecastError, ValueError):
    """Operand extents are incompatible with the requested operation."""


class NonFiniteError(RecastError, ValueError):
    """A tensor would hold NaN or infinite values."""


class TopologyError(RecastError, ValueError):
    """Two models, checkpoints or snapshots disagree on layer/module layout."""


class BudgetExceededError(RecastError):
    """The trainable-parameter count of a task exceeds its budget."""

    def __init__(self, required, budget):
        super().__init__(f"task needs {required} trainable parameters, budget is {budget}")
        self.required = required
        self.budget = budget


class NumericalError(RecastError, ArithmeticError):
    """Iteration failed to converge or a loss diverged."""


class UndefinedMetricError(RecastError, ValueError):
    """A similarity, diversity or entropy is undefined for the given input."""


class FormatError(RecastError, ValueError):
    """A checkpoint file is malformed."""


class TrainingError(RecastError):
    """Training stopped before reaching its required quality."""
