class UnfoldRpcaError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(UnfoldRpcaError, ValueError):
    """Tensor or matrix dimensions are incompatible."""


class ConfigMismatchError(UnfoldRpcaError, ValueError):
    """A checkpoint was written for a different model configuration."""


class NumericalError(UnfoldRpcaError, ArithmeticError):
    """A numeric routine failed or produced non-finite values."""
