"""Exception hierarchy shared across the package."""


class ConsLassoError(Exception):
    """Base class for all package errors."""


class InputError(ConsLassoError, ValueError):
    """Malformed or inconsistent user input (shapes, non-finite values, bad indices)."""


class NumericalError(ConsLassoError, ArithmeticError):
    """A computation produced NaN/inf or hit a degenerate configuration."""


class ConvergenceError(NumericalError):
    """No fit on a tuning grid converged."""


class SingularityError(NumericalError):
    """A matrix or scale needed for inference is (numerically) singular."""
