"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only what the deblurring network and its loss need: broadcasting
arithmetic, matmul, reductions, SiLU, sqrt, row gathers, segment sums and
concatenation. Nodes are recorded only when some input requires a gradient,
so inference runs at plain numpy speed.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


class NonDifferentiableError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def silu(a):
    a = as_tensor(a)
    x = a.data
    s = expit(x)
    return _node(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    a = as_tensor(a)
    x = a.data
    return _node(x * x, (a,), lambda g: (2.0 * g * x,))


def getitem(a, key):
    a = as_tensor(a)
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _node(a.data[key], (a,), back)


def concat(items, axis=-1):
    items = [as_tensor(t) for t in items]
    sizes = [t.data.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in items], axis=axis), tuple(items), lambda g: tuple(np.split(g, cuts, axis=axis)))


class Segments:
    """Integer index vector with a cached sparse scatter matrix.

    ``take`` gathers rows by the index; ``segment_sum`` scatters rows into
    ``num`` buckets. Each is the other's adjoint.
    """

    __slots__ = ("index", "num", "_S")

    def __init__(self, index, num):
        self.index = np.ascontiguousarray(index, dtype=np.int64)
        self.num = int(num)
        self._S = None

    @property
    def S(self):
        if self._S is None:
            E = self.index.shape[0]
            self._S = sp.csr_matrix((np.ones(E), (self.index, np.arange(E))), shape=(self.num, E))
        return self._S

    def scatter(self, x):
        if x.ndim == 1:
            return np.bincount(self.index, weights=x, minlength=self.num)
        return np.asarray(self.S @ x)


def _as_segments(index, num):
    return index if isinstance(index, Segments) else Segments(index, num)


def take(a, index):
    """Rows of ``a`` selected by ``index`` (an int array or ``Segments``)."""
    a = as_tensor(a)
    seg = _as_segments(index, a.data.shape[0])
    if seg.num != a.data.shape[0]:
        raise ValueError(f"index built for {seg.num} rows, tensor has {a.data.shape[0]}")
    return _node(a.data[seg.index], (a,), lambda g: (seg.scatter(g),))


def segment_sum(a, index, num=None):
    """Sum rows of ``a`` into ``num`` buckets given by ``index``."""
    a = as_tensor(a)
    seg = _as_segments(index, num)
    return _node(seg.scatter(a.data), (a,), lambda g: (g[seg.index],))


def stop_gradient(a):
    return Tensor(as_tensor(a).data)


def nondifferentiable(a, what="operation"):
    """Pass values through; reaching this node on the backward pass is an error."""
    a = as_tensor(a)

    def back(g):
        raise NonDifferentiableError(f"no gradient defined for {what}")

    return _node(a.data.copy(), (a,), back)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves=None):
    """Gradients of scalar ``root`` w.r.t. every reachable leaf (or the given ones).

    Returns a dict keyed by ``id(tensor)``.
    """
    if root.data.size != 1:
        raise ValueError("backward needs a scalar output")
    grads = {id(root): np.ones_like(root.data)}
    if not root.requires_grad:
        return {} if leaves is None else {id(t): np.zeros_like(t.data) for t in leaves}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    if leaves is not None:
        return {id(t): grads.get(id(t), np.zeros_like(t.data)) for t in leaves}
    return grads


def gradient(params: dict, loss_closure) -> tuple:
    """Evaluate ``loss_closure`` on leaf tensors wrapping ``params``; return (loss, grads).

    ``grads`` has the same keys and shapes as ``params``.
    """
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = loss_closure(leaves)
    loss = as_tensor(loss)
    g = backward(loss, list(leaves.values()))
    return float(loss.data), {k: g[id(t)] for k, t in leaves.items()}
