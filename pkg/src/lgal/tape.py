"""Reverse-mode differentiation over numpy arrays.

The graph is built eagerly by a small, closed set of array operations:
what dense layers, Gaussian log-densities, radial-basis features and
log-sum-exp need, and nothing more. Values are float64 arrays,
broadcasting follows numpy rules, and gradients are summed back down to
each operand's shape. Nodes created from plain arrays via ``const`` do
not track gradients; ``leaf`` nodes collect them in ``.grad`` after
``backward`` runs on a scalar output.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def stable_sigmoid(x: Array) -> Array:
    """Logistic function computed without overflow on either tail."""
    x = _as_array(x)
    with np.errstate(over="ignore"):
        t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def stable_softplus(x: Array) -> Array:
    """log(1 + exp(x)) with a linear branch past x = 30."""
    x = _as_array(x)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


class Var:
    """A value in the graph plus the rules to push gradients to its parents."""

    __slots__ = ("data", "grad", "parents", "vjps", "track")

    def __init__(self, data, parents=(), vjps=(), track=False):
        self.data = _as_array(data)
        self.grad = None
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.track = bool(track) or any(p.track for p in self.parents)

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def const(x) -> Var:
    """Wrap an array as a non-tracked node."""
    if isinstance(x, Var):
        return x
    return Var(x)


def leaf(x) -> Var:
    """Wrap an array as a gradient-collecting node."""
    return Var(x, track=True)


def _coerce(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def add(a, b) -> Var:
    a, b = _coerce(a), _coerce(b)
    return Var(
        a.data + b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a, b) -> Var:
    a, b = _coerce(a), _coerce(b)
    return Var(
        a.data - b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


def mul(a, b) -> Var:
    a, b = _coerce(a), _coerce(b)
    return Var(
        a.data * b.data,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data
    return Var(
        out,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * out / b.data, b.data.shape),
        ),
    )


def matmul(a, b) -> Var:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise InvalidArgumentError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    return Var(
        a.data @ b.data,
        parents=(a, b),
        vjps=(
            lambda g: g @ b.data.T,
            lambda g: a.data.T @ g,
        ),
    )


def transpose(a) -> Var:
    a = _coerce(a)
    return Var(a.data.T, parents=(a,), vjps=(lambda g: g.T,))


def reshape(a, shape) -> Var:
    a = _coerce(a)
    return Var(
        a.data.reshape(shape),
        parents=(a,),
        vjps=(lambda g: g.reshape(a.data.shape),),
    )


def exp(a) -> Var:
    a = _coerce(a)
    out = np.exp(a.data)
    return Var(out, parents=(a,), vjps=(lambda g: g * out,))


def log(a) -> Var:
    a = _coerce(a)
    return Var(np.log(a.data), parents=(a,), vjps=(lambda g: g / a.data,))


def sqrt(a) -> Var:
    a = _coerce(a)
    out = np.sqrt(a.data)
    # Guarded at zero: subgradient 0 would divide by 0; clamp the slope.
    return Var(
        out,
        parents=(a,),
        vjps=(lambda g: g * (0.5 / np.maximum(out, 1e-150)),),
    )


def square(a) -> Var:
    a = _coerce(a)
    return Var(a.data * a.data, parents=(a,), vjps=(lambda g: g * (2.0 * a.data),))


def pow_const(a, p: float) -> Var:
    a = _coerce(a)
    return Var(
        a.data**p,
        parents=(a,),
        vjps=(lambda g: g * (p * a.data ** (p - 1.0)),),
    )


def tanh(a) -> Var:
    a = _coerce(a)
    out = np.tanh(a.data)
    return Var(out, parents=(a,), vjps=(lambda g: g * (1.0 - out * out),))


def sigmoid(a) -> Var:
    a = _coerce(a)
    out = stable_sigmoid(a.data)
    return Var(out, parents=(a,), vjps=(lambda g: g * (out * (1.0 - out)),))


def softplus(a) -> Var:
    a = _coerce(a)
    return Var(
        stable_softplus(a.data),
        parents=(a,),
        vjps=(lambda g: g * stable_sigmoid(a.data),),
    )


def clip_min(a, floor: float) -> Var:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = _coerce(a)
    return Var(
        np.maximum(a.data, floor),
        parents=(a,),
        vjps=(lambda g: g * (a.data > floor),),
    )


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape)

    return Var(out, parents=(a,), vjps=(vjp,))


def vmean(a, axis=None) -> Var:
    a = _coerce(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis: int = -1) -> Var:
    """log-sum-exp along one axis, shifted by the per-slice maximum."""
    a = _coerce(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    # A fully -inf slice would poison the shift; keep the shift finite.
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(total)
    softmax = shifted / total
    out = np.squeeze(out_keep, axis=axis)

    def vjp(g):
        return np.expand_dims(g, axis) * softmax

    return Var(out, parents=(a,), vjps=(vjp,))


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar `root` into every tracked node."""
    if root.data.size != 1:
        raise InvalidArgumentError(
            f"backward requires a scalar root, got shape {root.data.shape}"
        )
    if not root.track:
        return
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.track and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for p, vjp in zip(node.parents, node.vjps):
            if not p.track:
                continue
            contrib = vjp(g)
            if p.grad is None:
                p.grad = np.zeros(p.data.shape)
            p.grad += contrib
