"""Differential selective state-space models on a small numpy autodiff engine."""

from .errors import (
    ConfigError,
    DataError,
    DiffSSMError,
    DimensionError,
    IntegrityError,
    NumericalError,
    ResourceError,
)
from .kernels import BACKEND as SCAN_BACKEND
from .model import BlockSpec, LanguageModel, build_model, stack_specs
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "BlockSpec",
    "ConfigError",
    "DataError",
    "DiffSSMError",
    "DimensionError",
    "IntegrityError",
    "LanguageModel",
    "NumericalError",
    "ResourceError",
    "SCAN_BACKEND",
    "Tensor",
    "build_model",
    "no_grad",
    "stack_specs",
]
