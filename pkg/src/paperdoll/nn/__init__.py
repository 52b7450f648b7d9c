from . import checkpoint, layers, optim, tensor
from .gradcheck import GradReport, grad_check
from .optim import adam_step
from .tensor import Parameter, Variable, no_grad

__all__ = [
    "tensor",
    "layers",
    "optim",
    "checkpoint",
    "Variable",
    "Parameter",
    "no_grad",
    "adam_step",
    "grad_check",
    "GradReport",
]
