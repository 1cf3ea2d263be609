"""Layer containers with named parameters and buffers."""

import math

import numpy as np

from ..errors import ConfigError, SchemaError
from . import functional as F
from .tensor import Parameter, Tensor, get_default_dtype


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())


class Module:
    """Base container. Parameters, buffers and submodules are discovered from
    instance attributes in assignment order, which fixes the naming order."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def register_buffer(self, name, value):
        names = list(getattr(self, "_buffer_names", ()))
        if name not in names:
            names.append(name)
        self._buffer_names = tuple(names)
        setattr(self, name, value)

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if strict and (missing or unexpected):
            raise SchemaError(
                f"state does not match module: missing {missing}, unexpected {unexpected}",
                missing=missing, unexpected=unexpected)
        for name, value in state.items():
            target = own.get(name)
            current = target.data if target is not None else buffers.get(name)
            if current is None:
                continue
            value = np.asarray(value)
            if value.shape != current.shape:
                raise SchemaError(f"shape mismatch for {name}: {value.shape} vs {current.shape}")
            current[...] = value
        return self


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, zero_init=False):
        shape = (in_features, out_features)
        if zero_init:
            self.weight = Parameter(np.zeros(shape))
        else:
            self.weight = Parameter(glorot_uniform(rng, shape, in_features, out_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True):
        k = kernel_size
        shape = (out_channels, in_channels, k, k)
        self.weight = Parameter(glorot_uniform(rng, shape, in_channels * k * k, out_channels * k * k))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True):
        k = kernel_size
        shape = (out_channels, in_channels, k)
        self.weight = Parameter(glorot_uniform(rng, shape, in_channels * k, out_channels * k))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True):
        k = kernel_size
        shape = (in_channels, out_channels, k, k)
        self.weight = Parameter(glorot_uniform(rng, shape, in_channels * k * k, out_channels * k * k))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalization over axis 1 for (N, C) or (N, C, ...) inputs."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(num_features, dtype=get_default_dtype()))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, features, eps=1e-5):
        self.weight = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class InstanceNorm2d(Module):
    def __init__(self, eps=1e-5):
        self.eps = eps

    def forward(self, x):
        return F.instance_norm(x, self.eps)


class PReLU(Module):
    def __init__(self, num_parameters=1, init=0.25):
        self.weight = Parameter(np.full(num_parameters, init))

    def forward(self, x):
        return F.prelu(x, self.weight)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Activation(Module):
    def __init__(self, name):
        if name not in F.ACTIVATIONS:
            raise ConfigError(f"unknown activation {name!r}")
        self.name = name

    def forward(self, x):
        return F.ACTIVATIONS[self.name](x)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over (B, T, d) token matrices.

    Queries, keys and values are split into ``heads`` slices of width
    ``d // heads``; head outputs are concatenated and mixed by ``w_o``.
    """

    def __init__(self, d_model, heads, rng):
        if d_model % heads:
            raise ConfigError(f"model width {d_model} is not divisible by {heads} heads")
        self.heads = heads
        self.d_k = d_model // heads
        self.w_q = Parameter(glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.w_k = Parameter(glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.w_v = Parameter(glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.w_o = Parameter(glorot_uniform(rng, (d_model, d_model), d_model, d_model))

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def attention_weights(self, x):
        q, k = self._split(x @ self.w_q), self._split(x @ self.w_k)
        return F.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d_k)), axis=-1)

    def forward(self, x):
        b, t, d = x.shape
        weights = self.attention_weights(x)
        v = self._split(x @ self.w_v)
        heads = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return heads @ self.w_o


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer: x + attn(LN(x)), then x + FF(LN(x))."""

    def __init__(self, d_model, heads, d_ff, rng):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff2(F.relu(self.ff1(self.norm2(x))))
