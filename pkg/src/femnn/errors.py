"""Exception hierarchy shared by all modules."""


class FemNNError(Exception):
    """Base class for package errors."""


class ShapeError(FemNNError, ValueError):
    """Operand dimensions do not conform."""


class SingularMatrixError(FemNNError, ArithmeticError):
    """A pivot fell below the singularity threshold."""


class ParameterError(FemNNError, ValueError):
    """A physical or configuration parameter is out of its valid range."""


class ConstraintError(FemNNError, ValueError):
    """Invalid Dirichlet constraint set."""


class RegistryError(FemNNError, KeyError):
    """Unknown problem family."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DivergenceError(FemNNError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (mean loss = {loss})")
        self.epoch = epoch
        self.loss = loss


class NonConvergenceError(FemNNError, ArithmeticError):
    """Iterative refinement hit its iteration cap."""

    def __init__(self, message, best_iterate, iterations):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.iterations = iterations


class InsufficientDataError(FemNNError, ValueError):
    """Too few samples for the requested statistic."""
