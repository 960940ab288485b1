"""A small reverse-mode array engine: tensors, cell primitives, losses, optimizers."""

from . import functional
from .functional import cross_entropy
from .gradcheck import NonDeterministicFunction, grad_check
from .optim import (
    NonFiniteGradient,
    OptimState,
    adam_state,
    adam_step,
    clip_gradients,
    cosine_lr,
    global_norm,
    sgd_state,
    sgd_step,
)
from .primitives import ENLARGED_OPS, STANDARD_OPS, OpKind, PrimitiveParams, apply_primitive, init_primitive
from .tensor import ShapeError, TapeError, Tensor, backward, grad_enabled, no_grad, zero_grad

__all__ = [
    "ENLARGED_OPS", "STANDARD_OPS", "NonDeterministicFunction", "NonFiniteGradient", "OpKind",
    "OptimState", "PrimitiveParams", "ShapeError", "TapeError", "Tensor", "adam_state", "adam_step",
    "apply_primitive", "backward", "clip_gradients", "cosine_lr", "cross_entropy", "functional",
    "global_norm", "grad_check", "grad_enabled", "init_primitive", "no_grad", "sgd_state", "sgd_step",
    "zero_grad",
]
