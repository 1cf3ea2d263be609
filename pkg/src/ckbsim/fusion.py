"""Fusion of the location, image and semantic feature branches into one
token matrix.

:class:`AttentionFusion` projects every branch to ``T`` tokens of width
``d``, runs per-branch multi-head self-attention and mixes the branches
with softmax gates.  :class:`LinearFusion` and :class:`CNNFusion` are the
baselines used in the fusion ablation.
"""

import numpy as np

from .errors import ConfigError, DimensionError
from .tensorkit import Conv2d, Linear, Module, MultiHeadSelfAttention, Parameter, Tensor
from .tensorkit import functional as F

GATING_MODES = ("direct", "uniform", "adaptive")
BRANCHES = ("p", "i", "s")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def gate_logits(units, w, activation="tanh"):
    """gamma_m = w . act(mean over tokens of U_m); ``units`` is (B, 3, T, d)."""
    pooled = F.mean_pool(units, axis=2)
    return F.ACTIVATIONS[activation](pooled) @ w


def gate_fuse(u_p, u_i, u_s, w=None, mode="adaptive", activation="tanh"):
    """Weighted sum of three (B, T, d) branches. Returns (F_v, alpha (B, 3))."""
    if mode not in GATING_MODES:
        raise ConfigError(f"unknown gating mode {mode!r}; expected one of {GATING_MODES}")
    if not u_p.shape == u_i.shape == u_s.shape:
        raise DimensionError(f"branch shapes differ: {u_p.shape}, {u_i.shape}, {u_s.shape}")
    units = F.stack([u_p, u_i, u_s], axis=1)
    b = units.shape[0]
    if mode == "direct":
        alpha = Tensor(np.ones((b, 3)))
    elif mode == "uniform":
        alpha = Tensor(np.full((b, 3), 1.0 / 3.0))
    else:
        if w is None:
            raise ConfigError("adaptive gating needs a gate vector")
        alpha = F.softmax(gate_logits(units, w, activation), axis=-1)
    fused = (units * alpha.reshape(b, 3, 1, 1)).sum(axis=1)
    return fused, alpha


class TokenProjection(Module):
    """Affine map from a feature vector to a (T, d) token matrix."""

    def __init__(self, in_features, tokens, d_model, rng, zero_init=False, bias=True):
        self.fc = Linear(in_features, tokens * d_model, rng, bias=bias, zero_init=zero_init)
        self.in_features = in_features
        self.tokens = tokens
        self.d_model = d_model

    def forward(self, x):
        x = _as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"expected {self.in_features} input features, got {x.shape[-1]}")
        return self.fc(x).reshape(x.shape[0], self.tokens, self.d_model)


class AttentionFusion(Module):
    def __init__(self, dims, rng, tokens=8, d_model=64, heads=4, mode="adaptive",
                 activation="tanh", zero_init=False, proj_bias=True):
        if mode not in GATING_MODES:
            raise ConfigError(f"unknown gating mode {mode!r}")
        if activation not in F.ACTIVATIONS:
            raise ConfigError(f"unknown gate activation {activation!r}")
        if d_model % heads:
            raise ConfigError(f"model width {d_model} is not divisible by {heads} heads")
        self.proj = [TokenProjection(n, tokens, d_model, rng, zero_init, proj_bias) for n in dims]
        self.attn = [MultiHeadSelfAttention(d_model, heads, rng) for _ in dims]
        # zero gate vector: training starts from uniform weights
        self.w = Parameter(np.zeros(d_model))
        self.mode = mode
        self.activation = activation
        self.tokens = tokens
        self.d_model = d_model
        self.last_alpha = None

    def project_tokens(self, p, i, s):
        return [proj(x) for proj, x in zip(self.proj, (p, i, s))]

    def self_attend(self, xs):
        return [attn(x) for attn, x in zip(self.attn, xs)]

    def forward(self, p, i, s):
        units = self.self_attend(self.project_tokens(p, i, s))
        fused, alpha = gate_fuse(*units, self.w, self.mode, self.activation)
        self.last_alpha = alpha.data
        return fused


class LinearFusion(Module):
    """Concatenate the three feature vectors and map them to tokens with one
    affine layer."""

    def __init__(self, dims, rng, tokens=8, d_model=64, **_):
        self.proj = TokenProjection(sum(dims), tokens, d_model, rng)
        self.dims = tuple(dims)
        self.last_alpha = None

    def forward(self, p, i, s):
        xs = [_as_tensor(x) for x in (p, i, s)]
        for x, n in zip(xs, self.dims):
            if x.shape[-1] != n:
                raise DimensionError(f"expected {n} features, got {x.shape[-1]}")
        return self.proj(F.concat(xs, axis=-1))


class CNNFusion(Module):
    """Project each branch to a token matrix, stack the three as channels and
    mix them with a 3x3 convolution."""

    def __init__(self, dims, rng, tokens=8, d_model=64, **_):
        self.proj = [TokenProjection(n, tokens, d_model, rng) for n in dims]
        self.conv = Conv2d(len(dims), 1, 3, rng, padding=1)
        self.last_alpha = None

    def forward(self, p, i, s):
        xs = [proj(x) for proj, x in zip(self.proj, (p, i, s))]
        b, t, d = xs[0].shape
        return self.conv(F.stack(xs, axis=1)).reshape(b, t, d)


FUSIONS = {"attention": AttentionFusion, "linear": LinearFusion, "cnn": CNNFusion}


def make_fusion(kind, dims, rng, **kwargs):
    if kind not in FUSIONS:
        raise ConfigError(f"unknown fusion {kind!r}; expected one of {sorted(FUSIONS)}")
    return FUSIONS[kind](dims, rng, **kwargs)


__all__ = [
    "AttentionFusion", "BRANCHES", "CNNFusion", "FUSIONS", "GATING_MODES", "LinearFusion",
    "TokenProjection", "gate_fuse", "gate_logits", "make_fusion",
]
