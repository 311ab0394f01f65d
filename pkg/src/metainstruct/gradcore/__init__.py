"""Minimal reverse-mode autodiff, optimizers and gradient checking."""

from . import ops
from .checkpoint import CheckpointError, load_arrays, load_checkpoint, save_checkpoint
from .gradcheck import finite_difference_check
from .optim import OptimizerState, adam, optimizer_step, sgd
from .params import ParamRegistry
from .tensor import ContractError, DimensionError, Tensor, no_grad

__all__ = [
    "CheckpointError",
    "ContractError",
    "DimensionError",
    "OptimizerState",
    "ParamRegistry",
    "Tensor",
    "adam",
    "finite_difference_check",
    "load_arrays",
    "load_checkpoint",
    "no_grad",
    "ops",
    "optimizer_step",
    "save_checkpoint",
    "sgd",
]
