"""Minimal reverse-mode differentiation over numpy arrays.

Each operation records its parents and a closure mapping the output gradient
to one gradient per parent.  :func:`backward` walks the recorded graph in
reverse topological order.  Only the operations the model needs are provided.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .graph import scatter_rows

__all__ = [
    "Var", "as_var", "backward",
    "add", "sub", "mul", "scale", "matmul", "spmm", "take", "segment_sum",
    "segment_softmax", "column", "reshape", "transpose", "concat", "elu", "normalize_rows", "rowdot", "total",
    "mean", "log_sigmoid", "sum_squares",
]


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        return take(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def _op(value, parents, backward_fn) -> Var:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Var(value, requires_grad=False)
    return Var(value, parents, backward_fn, True)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(out: Var, seed=None) -> None:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every reachable Var."""
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents)
    grads = {id(out): np.ones_like(out.value) if seed is None else np.asarray(seed, float)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Var:
    a = as_var(a)
    return _op(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def spmm(m: sp.spmatrix, x) -> Var:
    """Constant sparse matrix times ``x``; no gradient flows into ``m``."""
    x = as_var(x)
    m = sp.csr_matrix(m)
    mt = m.T.tocsr()
    return _op(np.asarray(m @ x.value), (x,), lambda g: (np.asarray(mt @ g),))


def take(x, idx) -> Var:
    """Row gather ``x[idx]`` with scatter-add backward."""
    x = as_var(x)
    idx = np.asarray(idx, dtype=np.int64)
    return _op(x.value[idx], (x,), lambda g: (scatter_rows(idx, g, x.shape[0]),))


def segment_sum(x, seg, n: int) -> Var:
    """``out[s] = sum of x[e] over e with seg[e] == s`` for ``s < n``."""
    x = as_var(x)
    seg = np.asarray(seg, dtype=np.int64)
    return _op(scatter_rows(seg, x.value, n), (x,), lambda g: (g[seg],))


def segment_softmax(logits, seg, n: int) -> Var:
    """Softmax of a 1-D ``logits`` vector within each segment."""
    logits = as_var(logits)
    seg = np.asarray(seg, dtype=np.int64)
    z = logits.value
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, seg, z)
    e = np.exp(z - mx[seg])
    denom = np.bincount(seg, weights=e, minlength=n)
    p = e / denom[seg]

    def bwd(g):
        dot = np.bincount(seg, weights=g * p, minlength=n)
        return (p * (g - dot[seg]),)

    return _op(p, (logits,), bwd)


def column(v) -> Var:
    """View a 1-D Var as an ``(n, 1)`` column."""
    v = as_var(v)
    return _op(v.value[:, None], (v,), lambda g: (g[:, 0],))


def reshape(v, shape) -> Var:
    v = as_var(v)
    return _op(v.value.reshape(shape), (v,), lambda g: (g.reshape(v.shape),))


def transpose(v) -> Var:
    v = as_var(v)
    return _op(v.value.T, (v,), lambda g: (g.T,))


def concat(parts, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _op(np.concatenate([p.value for p in parts], axis=axis), parts, bwd)


def elu(x, alpha: float = 1.0) -> Var:
    x = as_var(x)
    neg = x.value < 0
    ex = np.exp(np.where(neg, x.value, 0.0))
    out = np.where(neg, alpha * (ex - 1.0), x.value)
    return _op(out, (x,), lambda g: (g * np.where(neg, alpha * ex, 1.0),))


def normalize_rows(x, eps: float = 1e-12) -> Var:
    """Rows scaled to unit L2 norm; all-zero rows stay zero."""
    x = as_var(x)
    norm = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True))
    inv = np.where(norm > eps, 1.0 / np.maximum(norm, eps), 0.0)
    y = x.value * inv

    def bwd(g):
        return (inv * (g - y * (g * y).sum(axis=1, keepdims=True)),)

    return _op(y, (x,), bwd)


def rowdot(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op((a.value * b.value).sum(axis=1), (a, b),
               lambda g: (g[:, None] * b.value, g[:, None] * a.value))


def total(x) -> Var:
    x = as_var(x)
    return _op(np.asarray(x.value.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x) -> Var:
    x = as_var(x)
    n = max(x.value.size, 1)
    return _op(np.asarray(x.value.mean() if x.value.size else 0.0), (x,),
               lambda g: (np.full(x.shape, float(g) / n),))


def log_sigmoid(x) -> Var:
    x = as_var(x)
    v = x.value
    out = -np.logaddexp(0.0, -v)
    sig_neg = np.exp(-np.logaddexp(0.0, v))  # sigmoid(-x)
    return _op(out, (x,), lambda g: (g * sig_neg,))


def sum_squares(x) -> Var:
    x = as_var(x)
    return _op(np.asarray((x.value ** 2).sum()), (x,), lambda g: (2.0 * float(g) * x.value,))
