"""Exception hierarchy shared by every bestta module."""


class BesttaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(BesttaError, ValueError):
    pass


class InvalidShape(BesttaError, ValueError):
    pass


class DegenerateDirection(BesttaError, ArithmeticError):
    """A vector passed to a cosine has (near) zero norm."""


class DegenerateDenominator(BesttaError, ArithmeticError):
    """The BeIN standard-deviation estimator denominator is not positive."""


class NonPositiveStyleSigma(BesttaError, ValueError):
    pass


class StaleCache(BesttaError, ValueError):
    """A backward pass received a cache that does not match its upstream."""


class NonFiniteGradient(BesttaError, ArithmeticError):
    pass


class ConvergenceFailure(BesttaError, RuntimeError):
    pass


class EmptySource(BesttaError, ValueError):
    pass


class EmptyDataset(BesttaError, ValueError):
    pass


class InvalidSeverity(BesttaError, ValueError):
    pass


class DegenerateInput(BesttaError, ValueError):
    pass


class IoFailure(BesttaError, OSError):
    pass


class NotFittedError(BesttaError, AttributeError):
    pass
