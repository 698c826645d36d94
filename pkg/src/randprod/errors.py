"""Exception hierarchy shared by every module of the package."""


class RandProdError(Exception):
    """Base class for all package errors."""


class ValidationError(RandProdError, ValueError):
    pass


class ParseError(RandProdError, ValueError):
    pass


class UnknownBuiltin(ValidationError):
    pass


class BadParams(ValidationError):
    pass


class ZeroVector(RandProdError, ValueError):
    pass


class NotNormalised(RandProdError, ValueError):
    pass


class DimensionTooSmall(RandProdError, ValueError):
    pass


class NoTrackedVector(RandProdError, LookupError):
    pass


class NumericalError(RandProdError, ArithmeticError):
    """Numerical abort. ``step`` carries the step index when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step

    def __str__(self) -> str:
        msg = super().__str__()
        if self.step is not None:
            return f"{msg} (at step {self.step})"
        return msg


class SingularMatrix(NumericalError):
    pass


class NonInvertibleA(NumericalError):
    pass


class SingularPerturbedAtom(NumericalError):
    pass


class Overflow(NumericalError):
    pass


class ZeroT(NumericalError):
    pass


class NearZeroDenominator(NumericalError):
    pass


class HypothesisSuspect(NumericalError):
    """Too many rejected samples: the ensemble probably violates the
    irreducibility/contraction hypotheses."""
