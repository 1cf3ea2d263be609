"""Minimal reverse-mode autodiff and neural-network substrate."""

from . import functional
from .gradcheck import grad_check
from .nn import (Activation, BatchNorm, Conv1d, Conv2d, ConvTranspose2d, InstanceNorm2d,
                 LayerNorm, Linear, Module, MultiHeadSelfAttention, PReLU, ReLU, Sequential,
                 TransformerEncoderLayer)
from .optim import Adam, adam_step
from .params import ParameterSet
from .tensor import (Parameter, Tensor, get_default_dtype, is_grad_enabled, no_grad, precision,
                     set_default_dtype)

__all__ = [
    "Activation", "Adam", "BatchNorm", "Conv1d", "Conv2d", "ConvTranspose2d", "InstanceNorm2d",
    "LayerNorm", "Linear", "Module", "MultiHeadSelfAttention", "PReLU", "Parameter",
    "ParameterSet", "ReLU", "Sequential", "Tensor", "TransformerEncoderLayer", "adam_step",
    "functional", "get_default_dtype", "grad_check", "is_grad_enabled", "no_grad", "precision",
    "set_default_dtype",
]
