"""Array-valued reverse-mode automatic differentiation.

Every operation produces a :class:`Tensor` node that remembers its parents and
a closure mapping the output adjoint onto parent adjoints.  Nodes carry a
monotonically increasing id, so creation order is a valid topological order
and the backward pass simply visits reachable nodes by descending id.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a backward pass starts from a non-finite loss."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


_kinks: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect the branch masks of every ``relu`` evaluated inside the block.

    Two evaluations whose mask lists differ straddle a non-differentiable
    point, which invalidates a finite-difference comparison there.
    """
    global _kinks
    prev, _kinks = _kinks, []
    try:
        yield _kinks
    finally:
        _kinks = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")
    __array_ufunc__ = None   # make ``ndarray <op> Tensor`` defer to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="param")


def _make(data, parents: Iterable, backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _make(ad ** exponent, (a,),
                 lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * out), 0.0),)

    return _make(out, (a,), bw, "sqrt")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    if _kinks is not None:
        _kinks.append(pos)
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), bw, "cumsum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, key) -> Tensor:
    shape = a.shape
    keys = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in keys)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), bw, "getitem")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[index]`` along axis 0 (index may be any integer array)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        return (scatter_rows(index, g, shape[0]),)

    return _make(a.data[index], (a,), bw, "take")


def scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``index``."""
    flat_idx = index.reshape(-1)
    tail = values.shape[index.ndim:]
    vals = values.reshape(flat_idx.size, -1)
    out = np.empty((n, vals.shape[1]))
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(flat_idx, weights=vals[:, c], minlength=n)
    return out.reshape((n,) + tail)


def segment_sum(a: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Differentiable ``scatter_rows``: out[j] = sum of a[i] with index[i] == j."""
    index = np.asarray(index, dtype=np.int64)
    return _make(scatter_rows(index, a.data, n), (a,),
                 lambda g: (g[index],), "segment_sum")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([p.data for p in parts], axis=axis), parts, bw, "stack")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused ``x @ weight + bias`` for 2-D ``x``."""
    xd, wd = x.data, weight.data

    def bw(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _make(xd @ wd + bias.data, (x, weight, bias), bw, "linear")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable parameter."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError("backward() without a seed gradient needs a scalar loss")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss {loss.data!r}; refusing backward pass")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack_.extend(p for p in node._parents if p.requires_grad)

    adj: dict[int, np.ndarray] = {loss._id: np.asarray(grad, dtype=np.float64)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = adj.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adj.get(parent._id)
            adj[parent._id] = pg if prev is None else prev + pg
