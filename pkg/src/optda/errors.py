"""Exception hierarchy shared by all modules."""


class OptdaError(Exception):
    """Base class for library errors."""


class InvalidDimensionError(OptdaError, ValueError):
    pass


class OutOfBallError(OptdaError, ValueError):
    """A point lies outside the trapping ball B_R."""


class StepTooLargeError(OptdaError, ValueError):
    """Time step beyond the radius where the Taylor series is controlled."""


class NotInvertibleError(StepTooLargeError):
    """Backward flow requested further than the series can reach."""


class NumericalError(OptdaError, ArithmeticError):
    pass


class InsufficientDataError(OptdaError, ValueError):
    pass


class ConfigurationError(OptdaError, ValueError):
    pass


class DegenerateInputError(OptdaError, ValueError):
    """A reconstruction divisor fell below the configured floor."""


class OptimizationFailure(OptdaError):
    pass


class InitializationFailure(OptdaError):
    pass


class NotPositiveDefiniteError(OptdaError, ArithmeticError):
    pass


class MatrixFreeUnsupportedError(OptdaError):
    """Dense object requested above the dense dimension cap."""


class GridTooSmallError(OptdaError):
    pass
