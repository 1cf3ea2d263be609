"""Differentiable operations built on :class:`Tensor`.

Convolutions use an im2col layout: ``sliding_window_view`` exposes every
receptive field and a single ``tensordot`` does the contraction.  The input
gradient is scattered back with one strided slice-add per kernel offset.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor, as_tensor


def _pair(value):
    if isinstance(value, (tuple, list)):
        return tuple(value)
    return (value, value)


# -- activations ---------------------------------------------------------
def relu(x):
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._result(x.data * mask, (x,), backward, "relu")


def prelu(x, weight, axis=1):
    """Parametric rectifier; ``weight`` has one slope or one per channel."""
    shape = [1] * x.ndim
    if weight.size > 1:
        shape[axis] = weight.size
    slope = weight.data.reshape(shape)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        x._accumulate(np.where(pos, g, g * slope))
        if weight.requires_grad:
            gw = np.where(pos, 0.0, g * x.data)
            if weight.size > 1:
                axes = tuple(i for i in range(x.ndim) if i != axis)
                gw = gw.sum(axis=axes)
            else:
                gw = gw.sum().reshape(weight.shape)
            weight._accumulate(gw.reshape(weight.shape))

    return Tensor._result(out, (x, weight), backward, "prelu")


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return Tensor._result(out, (x,), backward, "tanh")


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor._result(out, (x,), backward, "sigmoid")


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (x,), backward, "softmax")


# -- normalization -------------------------------------------------------
def normalize(x, axes, eps=1e-5):
    """Standardize ``x`` to zero mean and unit (biased) variance over ``axes``."""
    axes = tuple(a % x.ndim for a in np.atleast_1d(axes))
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gs = g.sum(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True)
        x._accumulate(inv * (g - gs / n - xhat * gx / n))

    return Tensor._result(xhat, (x,), backward, "normalize")


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    out = normalize(x, -1, eps)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def _channel_shape(x, axis=1):
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return shape


def batch_norm(x, running_mean, running_var, weight=None, bias=None,
               training=True, momentum=0.1, eps=1e-5):
    """Normalize over every axis except the channel axis 1.

    In training mode the batch statistics are used and the running buffers
    are updated in place; in eval mode the running buffers are used.
    """
    axes = tuple(i for i in range(x.ndim) if i != 1)
    shape = _channel_shape(x)
    if training:
        n = int(np.prod([x.shape[a] for a in axes]))
        if n < 2:
            raise DimensionError("batch normalization needs more than one value per channel")
        out = normalize(x, axes, eps)
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes) * n / (n - 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        scale = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        out = (x - running_mean.reshape(shape)) * scale.astype(x.dtype)
    if weight is not None:
        out = out * weight.reshape(shape)
    if bias is not None:
        out = out + bias.reshape(shape)
    return out


def instance_norm(x, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes."""
    return normalize(x, tuple(range(2, x.ndim)), eps)


# -- convolution ---------------------------------------------------------
def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. ``x`` is (N, C, H, W), ``weight`` is (O, C, kh, kw)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shape mismatch {x.shape} * {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d kernel larger than padded input")
    # im2col: rows are output positions (n, i, j), columns (c, di, dj)
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, -1)
    w2 = weight.data.reshape(o, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, :, :, :, i, j]
            x._accumulate(dxp[:, ph:ph + h, pw:pw + w].transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv2d")


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """1-D cross-correlation. ``x`` is (N, C, L), ``weight`` is (O, C, k)."""
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D operands, got {x.shape} and {weight.shape}")
    n, c, length = x.shape
    o, _, k = weight.shape
    out = conv2d(x.reshape(n, c, 1, length), weight.reshape(o, c, 1, k), bias,
                 stride=(1, stride), padding=(0, padding))
    return out.reshape(n, o, out.shape[-1])


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed 2-D convolution. ``weight`` is (C_in, C_out, kh, kw)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"conv_transpose2d shape mismatch {x.shape} * {weight.shape}")
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    hf = (h - 1) * sh + kh
    wf = (w - 1) * sw + kw
    contrib = np.tensordot(x.data, weight.data, axes=([1], [0]))  # N, h, w, O, kh, kw
    full = np.zeros((n, o, hf, wf), dtype=contrib.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + sh * h:sh, j:j + sw * w:sw] += contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, ph:hf - ph, pw:wf - pw]
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, o, hf, wf), dtype=g.dtype)
        gfull[:, :, ph:hf - ph, pw:wf - pw] = g
        gcols = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :h, :w]
        if x.requires_grad:
            gx = np.tensordot(gcols, weight.data, axes=([1, 4, 5], [1, 2, 3]))
            x._accumulate(gx.transpose(0, 3, 1, 2))
        if weight.requires_grad:
            weight._accumulate(np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv_transpose2d")


def _pool_bounds(size, out):
    starts = [(i * size) // out for i in range(out)]
    ends = [-(-((i + 1) * size) // out) for i in range(out)]
    return list(zip(starts, ends))


def adaptive_avg_pool2d(x, output_size):
    oh, ow = _pair(output_size)
    n, c, h, w = x.shape
    if h % oh == 0 and w % ow == 0:
        bh, bw = h // oh, w // ow
        out = x.data.reshape(n, c, oh, bh, ow, bw).mean(axis=(3, 5))

        def backward(g):
            expanded = np.repeat(np.repeat(g, bh, axis=2), bw, axis=3) / (bh * bw)
            x._accumulate(expanded)

        return Tensor._result(out, (x,), backward, "adaptive_avg_pool2d")

    rows, cols = _pool_bounds(h, oh), _pool_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / area
        x._accumulate(gx)

    return Tensor._result(out, (x,), backward, "adaptive_avg_pool2d")


# -- structural ----------------------------------------------------------
def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    return Tensor._result(out, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [t.reshape(t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def mean_pool(x, axis=1):
    """Average over the token (or any) axis."""
    return x.mean(axis=axis)


def mse_loss(pred, target):
    diff = pred - as_tensor(target)
    return (diff * diff).mean()
