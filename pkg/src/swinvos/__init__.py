"""Windowed-attention video object segmentation at desk scale.

Subpackages: ``engine`` (tensors + reverse-mode autodiff), ``attention``
(2D/3D shifted-window blocks), ``encoders``, ``memread`` (dense + top-k
multi-scale memory read), ``decoder``, ``model`` (assembly, memory bank,
training), ``data`` (synthetic videos + PPM/PGM I/O), ``metrics`` (J / F),
``cli``.
"""

from . import engine
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    SwinVosError,
    UsageError,
)

__all__ = [
    "engine",
    "SwinVosError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "NumericError",
    "UsageError",
]

__version__ = "0.1.0"
