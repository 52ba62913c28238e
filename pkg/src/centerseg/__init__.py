"""Prototype-based semantic segmentation with a from-scratch numpy autodiff engine."""

from .config import RunConfig
from .errors import (CenterSegError, ConfigError, ContractError, DataError, DatasetIOError, DimensionError,
                     DomainError, NumericError)

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "CenterSegError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DatasetIOError",
    "DimensionError",
    "DomainError",
    "NumericError",
]
