"""Exception types shared across the package."""


class MatformerError(Exception):
    """Base class for all package errors."""


class DimensionError(MatformerError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class NumericError(MatformerError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(MatformerError, ValueError):
    """An invalid model, layer or run configuration."""


class CacheError(MatformerError, ValueError):
    """A KV cache does not match the layer it is used with."""


class LengthError(MatformerError, ValueError):
    """A sequence exceeds the model's context length."""


class BudgetError(MatformerError, ValueError):
    """No configuration satisfies the requested budget."""


class FitError(MatformerError, RuntimeError):
    """Curve fitting failed on every start point."""
