"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems are exit 1,
bad input data is exit 2, numeric failure (NaN/divergence) is exit 3.
"""


class SwinVosError(Exception):
    """Base class for all package errors."""


class DimensionError(SwinVosError, ValueError):
    """Tensor extents incompatible with an operation."""


class ConfigError(SwinVosError, ValueError):
    """Invalid hyper-parameter or model configuration."""


class UsageError(SwinVosError, RuntimeError):
    """An API or CLI contract was violated by the caller."""


class DataError(SwinVosError, ValueError):
    """Malformed input data (files, masks, label ranges)."""


class NumericError(SwinVosError, ArithmeticError):
    """Non-finite values appeared where finite math was required."""
