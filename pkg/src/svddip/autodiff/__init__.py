"""Minimal reverse-mode autodiff on numpy arrays."""

from . import ops
from .io import load_tensor, save_tensor
from .optim import Adam, adam_step, zero_grad
from .tensor import Parameter, Tape, Tensor, active_tape

__all__ = [
    "Adam",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "load_tensor",
    "ops",
    "save_tensor",
    "zero_grad",
]
