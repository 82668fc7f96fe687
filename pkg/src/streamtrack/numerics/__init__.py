"""Minimal float64 reverse-mode autodiff used by the tracking models."""

from .tensor import Tape, Tensor, astensor, no_grad, record
from .gradcheck import check_gradients, numeric_grad
from . import ops

__all__ = [
    "Tape",
    "Tensor",
    "astensor",
    "no_grad",
    "record",
    "check_gradients",
    "numeric_grad",
    "ops",
]
