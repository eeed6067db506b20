from . import checkpoint
from . import tensor as ops
from .gradcheck import grad_check
from .nn import LayerNorm, Linear, Module, ModuleList, Parameter, Scalar, xavier_uniform
from .optim import AdamState, adam_step
from .tensor import NumericsError, Tensor, no_grad

__all__ = [
    "AdamState",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "NumericsError",
    "Parameter",
    "Scalar",
    "Tensor",
    "adam_step",
    "checkpoint",
    "grad_check",
    "no_grad",
    "ops",
    "xavier_uniform",
]
