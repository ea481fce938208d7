"""Minimal tensor core: reverse-mode autodiff, Adam, and checkpoint I/O."""

from . import checkpoint, ops
from .gradcheck import grad_check
from .optim import Adam, adam_step, clip_grad_norm, global_norm
from .tensor import (
    NonFiniteValue,
    NotScalar,
    NumericsError,
    ShapeMismatch,
    Tape,
    Tensor,
    active_tape,
    default_dtype,
    no_grad,
    precision,
)

__all__ = [
    "Adam",
    "NonFiniteValue",
    "NotScalar",
    "NumericsError",
    "ShapeMismatch",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "checkpoint",
    "clip_grad_norm",
    "default_dtype",
    "global_norm",
    "grad_check",
    "no_grad",
    "ops",
    "precision",
]
