"""Deterministic float64 tensor kernel with tape-based reverse-mode autodiff."""

from . import kernels, ops
from .core import (
    ConfigurationError,
    DimensionError,
    StateError,
    Tape,
    Tensor,
    UsageError,
    backward,
    no_grad,
)
from .gradcheck import grad_check
from .ops import RunningStats
from .tns import TnsFormatError, load_tns, save_tns

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "RunningStats",
    "StateError",
    "Tape",
    "Tensor",
    "TnsFormatError",
    "UsageError",
    "backward",
    "grad_check",
    "kernels",
    "load_tns",
    "no_grad",
    "ops",
    "save_tns",
]
