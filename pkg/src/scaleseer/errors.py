"""Exception hierarchy shared by every module.

The CLI maps ``UsageError`` to exit code 2 and every ``NumericalError`` to
exit code 3.
"""


class ScaleSeerError(Exception):
    """Base class for all package errors."""


class UsageError(ScaleSeerError, ValueError):
    """Bad arguments, unknown names or violated preconditions."""


class DomainError(UsageError):
    """Argument outside the mathematical domain of an operation."""


class ContractError(UsageError):
    """Input violates a structural contract (e.g. asymmetric matrix)."""


class InfeasiblePatternError(UsageError):
    """A pattern assignment cannot express the target feature."""


class NumericalError(ScaleSeerError, ArithmeticError):
    """Non-finite values or failed numerical procedures."""


class ConvergenceError(NumericalError):
    """An iterative method stopped before reaching its tolerance.

    ``best`` carries the best estimate available when it gave up.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateKernelError(NumericalError):
    """Kernel with no positive spectrum."""


class CrossoverError(NumericalError):
    """Power-law fit spans a change of regime."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergentIntegralError(NumericalError):
    """Integrand does not decay inside the largest allowed window."""


class NoSaddleError(NumericalError):
    """The Legendre objective has no finite maximizer."""


class StepSizeError(NumericalError):
    """A Langevin chain diverged; the step size is too large."""
