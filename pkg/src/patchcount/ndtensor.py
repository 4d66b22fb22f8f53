"""Minimal dense-tensor core with reverse-mode autodiff.

Tensors wrap row-major float32 numpy buffers. Every primitive records a
backward rule on the tensors it produces; calling ``backward`` on a scalar
replays those rules in reverse topological order and accumulates gradients
into every ``requires_grad`` leaf. A finite-difference checker validates
the analytic gradients.
"""

from __future__ import annotations

import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Raised on invalid use of the recorded operation graph."""


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense array with an optional gradient buffer and graph linkage.

    Data produced by an operation is treated as immutable; only leaf
    parameters are updated in place (by the optimizer, between graphs).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_consumed")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else \
            self._raise_not_scalar()

    def _raise_not_scalar(self):
        raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # operator sugar; the free functions hold the actual rules
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, smul(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wrap an op result; records the rule only while grad is enabled."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise sum with numpy-style broadcasting."""
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    """Elementwise product with broadcasting."""
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def smul(a, c):
    """Product with a python scalar."""
    c = float(c)
    data = a.data * c

    def backward(g):
        _accum(a, g * c)

    return _make(data, (a,), backward)


def matmul(a, b):
    """Batched matrix product over the last two axes.

    Leading batch dimensions must match or be absent on one side.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), backward)


def transpose_last(a):
    """Swap the last two axes."""
    data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make(data, (a,), backward)


def reshape(a, shape):
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def mean(a, axis=None):
    """Arithmetic mean over one axis, or over all elements when axis=None."""
    data = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            _accum(a, np.full(a.shape, g / n, dtype=a.data.dtype))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape) / n)

    return _make(np.asarray(data), (a,), backward)


def sum_axis(a, axis):
    """Sum over one axis."""
    data = a.data.sum(axis=axis)

    def backward(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(data, (a,), backward)


def concat(tensors, axis):
    """Concatenate along an existing axis."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _accum(t, g[tuple(idx)])
            offset += size

    return _make(data, tuple(tensors), backward)


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start, stop) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        _accum(a, full)

    return _make(data, (a,), backward)


def absolute(a):
    """Elementwise |x|; subgradient 0 at exactly 0."""
    data = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, (a,), backward)


def softmax_rows(x):
    """Row-stochastic softmax over the last axis, max-shifted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accum(x, data * (g - dot))

    return _make(data, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to mean 0 / population variance 1, then affine."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ShapeError(
            f"layer_norm feature sizes differ: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = gamma.data * xhat + beta.data

    def backward(g):
        d = x.shape[-1]
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        dxhat = g * gamma.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _accum(x, dx)

    return _make(data, (x, gamma, beta), backward)


def gelu(x):
    """GELU via the tanh approximation."""
    u = _SQRT_2_OVER_PI * (x.data + _GELU_C * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x.data ** 2)
        dgelu = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        _accum(x, g * dgelu)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The recorded graph is consumed: a second backward through the same
    forward pass raises instead of silently double-accumulating.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this graph; run a new forward pass")
    if loss._backward is None and not loss._parents:
        raise GraphError("loss tensor is not on a recorded graph")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        is_leaf = node._backward is None
        if not is_leaf and node.grad is not None:
            node._backward(node.grad)
        node._consumed = True
        if not is_leaf:
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None  # intermediate grads are scratch space


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f, params, h=1e-3, high_precision=False, sample=None):
    """Compare analytic gradients of ``f(params)`` against central differences.

    Returns the max over checked coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``sample`` optionally restricts the check to the given flat coordinate
    indices. With ``high_precision`` the evaluations run on a float64 copy
    of ``params`` (the 64-bit re-check switch).
    """
    if h <= 0:
        raise ValueError("grad_check step h must be positive")
    original = params.data
    if high_precision:
        params.data = original.astype(np.float64)
    try:
        y1 = float(f(params).data)
        y2 = float(f(params).data)
        if y1 != y2:
            raise GraphError("grad_check requires a deterministic function; "
                             f"two evaluations gave {y1!r} and {y2!r}")

        params.zero_grad()
        loss = f(params)
        backward(loss)
        analytic = params.grad.reshape(-1).astype(np.float64)

        flat = params.data.reshape(-1)
        coords = range(flat.size) if sample is None else sample
        max_err = 0.0
        with no_grad():
            for i in coords:
                saved = flat[i]
                flat[i] = saved + h
                f_plus = float(f(params).data)
                flat[i] = saved - h
                f_minus = float(f(params).data)
                flat[i] = saved
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = analytic[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if err > max_err:
                    max_err = err
        return max_err
    finally:
        if high_precision:
            params.data = original
        params.zero_grad()
