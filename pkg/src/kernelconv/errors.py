"""Exception hierarchy shared by the library and the CLI."""


class KernelConvError(Exception):
    """Base class for all errors raised by kernelconv."""


class DataValidationError(KernelConvError, ValueError):
    """Input data or metadata violates a structural invariant."""


class NumericalError(KernelConvError, ArithmeticError):
    """A numerical procedure could not produce a trustworthy result."""


class IllConditionedError(NumericalError):
    """The normal-equation matrix is too ill-conditioned to invert.

    Attributes
    ----------
    rcond : float
        Reciprocal condition estimate of ``R^T R``.
    """

    def __init__(self, message: str, rcond: float):
        super().__init__(message)
        self.rcond = rcond


class DegenerateLOOError(NumericalError):
    """Leave-one-out shortcut undefined because a leverage is ~1."""

    def __init__(self, message: str, row: int, lam: float):
        super().__init__(message)
        self.row = row
        self.lam = lam


class FoldError(KernelConvError):
    """A cross-validation fold failed; wraps the underlying cause."""

    def __init__(self, pair: tuple, cause: Exception):
        super().__init__(f"fold {pair[0]!r}/{pair[1]!r} failed: {cause}")
        self.pair = pair
        self.cause = cause
