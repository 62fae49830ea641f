"""Exception hierarchy shared by all modules."""


class MinConvError(Exception):
    """Base class for every error raised by minconv."""


class DimensionError(MinConvError, ValueError):
    pass


class UndefinedCorrelationError(MinConvError, ArithmeticError):
    """Pearson coefficient requested for a sample with zero variance."""


class DegenerateInputError(MinConvError, ValueError):
    pass


class ZeroFilterError(MinConvError, ArithmeticError):
    """A filter whose mean absolute weight is zero cannot be rescaled."""


class ZeroInputStatisticsError(MinConvError, ArithmeticError):
    pass


class DivergenceError(MinConvError, FloatingPointError):
    pass


class IncompatibleCheckpointError(MinConvError):
    pass


class FormatError(MinConvError, ValueError):
    pass


class LengthError(FormatError):
    pass
