"""Desk-scale camera+LiDAR BEV fusion detector on a built-in autodiff engine."""

from .tensor import Tensor, Parameter, no_grad, backward
from .optim import Adam
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    GenerationError,
    NumericError,
    ShapeError,
)

__version__ = "0.1.0"
