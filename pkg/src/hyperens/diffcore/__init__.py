"""Minimal reverse-mode differentiation engine, seeded streams and optimizers."""

from . import tensor as ops
from .graph import GradCheckReport, backward, forward, grad_check
from .optim import OptimizerState, optimizer_step
from .rng import Rng, make_rng, stream_key
from .tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor

__all__ = [
    "GradCheckReport",
    "NonFiniteError",
    "OptimizerState",
    "Rng",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "forward",
    "grad_check",
    "make_rng",
    "ops",
    "optimizer_step",
    "stream_key",
]
