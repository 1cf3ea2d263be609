"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are enabled and
some input requires them, records a closure that propagates the incoming
gradient to its parents.  ``Tensor.backward`` walks the recorded graph in
reverse topological order.
"""

from contextlib import contextmanager

import numpy as np

from ..errors import DimensionError, NumericError

_config = {"dtype": np.float32, "grad": True, "check_finite": True}


def get_default_dtype():
    return _config["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _config["dtype"] = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _config["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _config["dtype"] = previous


@contextmanager
def no_grad():
    previous = _config["grad"]
    _config["grad"] = False
    try:
        yield
    finally:
        _config["grad"] = previous


def is_grad_enabled():
    return _config["grad"]


def _check(out, op):
    if _config["check_finite"] and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _config["dtype"], copy=True)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = _check(data, op)
        out.grad = None
        out.op = op
        needs = _config["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed once propagated
                    node.grad = None

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._result(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward, "neg")

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._result(a.data**exponent, (a,), backward, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim == 1 and b.ndim == 1:
            return (a * b).sum()
        if b.ndim == 1:
            return (a @ b.reshape(b.shape[0], 1)).reshape(a.shape[:-1])
        if a.ndim == 1:
            out = a.reshape(1, a.shape[0]) @ b
            return out.reshape(out.shape[:-2] + out.shape[-1:])
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # -- reductions and shape ops --------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._result(out, (a,), backward, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        a = self

        def backward(g):
            a._accumulate(np.transpose(g, inverse))

        return Tensor._result(np.transpose(a.data, axes), (a,), backward, "transpose")

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, i, j):
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(axes)

    def __getitem__(self, index):
        a = self
        if isinstance(index, Tensor):
            index = index.data

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._result(a.data[index], (a,), backward, "getitem")

    # -- elementwise math ----------------------------------------------
    def exp(self):
        a = self
        out = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out)

        return Tensor._result(out, (a,), backward, "exp")

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.log(a.data)
        return Tensor._result(out, (a,), backward, "log")

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / out)

        return Tensor._result(out, (a,), backward, "sqrt")


class Parameter(Tensor):
    """A leaf tensor that always requires gradients and owns its storage."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
