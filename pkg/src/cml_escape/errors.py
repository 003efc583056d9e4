"""Exception hierarchy shared by every module."""


class CMLError(Exception):
    """Base class for all errors raised by this package."""


class ParameterViolation(CMLError, ValueError):
    """A stated parameter inequality does not hold."""


class MarkovViolation(CMLError, ValueError):
    """A branch image meets an interval without strictly containing it."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class WordCountOverflow(CMLError, OverflowError):
    """The admissible word count exceeds the configured integer range."""


class SingularCoupling(CMLError, ArithmeticError):
    """The Fourier symbol vanishes (numerically) on the lattice grid."""


class FitFailure(CMLError):
    """No exponential envelope with rate below one fits the inverse kernel."""


class NotContracting(CMLError):
    """The backward contraction factor is not below one."""


class NoConvergence(CMLError):
    """An iteration did not reach its tolerance within the iteration cap."""


class Extinction(CMLError):
    """Every particle escaped; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class Degenerate(CMLError):
    """A survival trace cannot be fitted (zero survival in the window)."""


class BudgetExceeded(CMLError):
    """Word enumeration would exceed the configured budget."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required
