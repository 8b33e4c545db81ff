"""A small 2-D tensor type with reverse-mode automatic differentiation.

Every tensor wraps a 2-D numpy array. Operations on tensors that require
gradients record a closure that propagates the output gradient back to
their inputs; :meth:`Tensor.backward` replays those closures in reverse
topological order. Parameters are float32; gradient checks run the same
code in float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording in this thread (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` of every leaf that contributed to this scalar."""
        if self.shape != (1, 1):
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
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
        grads: Dict[int, np.ndarray] = {id(self): np.ones((1, 1), dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node._accumulate(g)
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            # drop the record so intermediate buffers can be freed
            node._parents = ()
            node._backward = None

    __matmul__ = lambda self, other: matmul(self, other)
    __add__ = lambda self, other: add(self, other)
    __mul__ = lambda self, other: mul(self, other)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check(cond: bool, what: str, *tensors: Tensor) -> None:
    if not cond:
        shapes = " vs ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{what}: incompatible shapes {shapes}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.cols == b.rows, "matmul", a, b)
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record(A @ B, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a ``(1, C)`` row broadcast over rows."""
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    _check(b.rows == 1 and b.cols == a.cols, "add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "mul", a, b)
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, s: float) -> Tensor:
    return _record(a.data * s, (a,), lambda g: (g * s,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as a single recorded op."""
    _check(x.cols == w.rows and b.shape == (1, w.cols), "linear", x, w, b)
    X, Wd = x.data, w.data

    def back(g):
        return (
            g @ Wd.T if x.requires_grad else None,
            X.T @ g if w.requires_grad else None,
            g.sum(axis=0, keepdims=True) if b.requires_grad else None,
        )

    return _record(X @ Wd + b.data, (x, w, b), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols of nothing")
    rows = parts[0].rows
    _check(all(p.rows == rows for p in parts), "concat_cols", *parts)
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), parts, back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (a,), back)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]``; gradients scatter-add back."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.rows

    def back(g):
        out = np.zeros((n, g.shape[1]), dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), back)


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _record(np.array([[a.data.sum()]], dtype=dt), (a,), lambda g: (np.full(shape, g[0, 0], dtype=dt),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n) if n else Tensor(np.zeros((1, 1), dtype=a.dtype))


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax.

    With ``weights`` (per class) the mean is weighted: sum(w_y * nll) / sum(w_y).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label index outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)[labels]
    total = w.sum()
    loss = -(w * logp[rows, labels]).sum() / total

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (w / total)[:, None] * g[0, 0],)

    return _record(np.array([[loss]], dtype=logits.dtype), (logits,), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize columns with the statistics of this batch.

    Returns ``(y, mean, var)`` where ``mean``/``var`` are the (biased) batch
    statistics as plain arrays, for running-average bookkeeping.
    """
    _check(gamma.shape == (1, x.cols) and beta.shape == (1, x.cols), "batch_norm", x, gamma, beta)
    X = x.data
    mu = X.mean(axis=0, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data

    def back(g):
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=0, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
        return (dx, dgamma, dbeta)

    y = _record((xhat * G + beta.data).astype(X.dtype, copy=False), (x, gamma, beta), back)
    return y, mu[0], var[0]


def batch_norm_fixed(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
                     eps: float = 1e-5) -> Tensor:
    """Normalize columns with fixed (running) statistics: an affine map per column."""
    inv = (1.0 / np.sqrt(np.asarray(var, dtype=x.dtype) + eps)).reshape(1, -1)
    mu = np.asarray(mean, dtype=x.dtype).reshape(1, -1)
    xhat = (x.data - mu) * inv
    G = gamma.data

    def back(g):
        return (g * G * inv, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _record((xhat * G + beta.data).astype(x.dtype, copy=False), (x, gamma, beta), back)


@dataclass
class SparseAdjacency:
    """Symmetric normalized adjacency D^-1/2 A D^-1/2 of an undirected graph.

    ``A`` is the 0/1 adjacency obtained by collapsing all directed edges
    (of any kind) into undirected pairs. Isolated nodes have all-zero rows.
    """

    n: int
    matrix: sp.csr_matrix
    _cache: Dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_edges(cls, n: int, src: Sequence[int], dst: Sequence[int]) -> "SparseAdjacency":
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        keep = src != dst
        a, b = np.minimum(src[keep], dst[keep]), np.maximum(src[keep], dst[keep])
        pairs = np.unique(np.stack([a, b], axis=1), axis=0) if a.size else np.zeros((0, 2), np.int64)
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        vals = 1.0 / np.sqrt(deg[rows] * deg[cols]) if rows.size else np.zeros(0)
        m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(n, m)

    def as_dtype(self, dtype) -> sp.csr_matrix:
        dtype = np.dtype(dtype)
        if dtype not in self._cache:
            self._cache[dtype] = self.matrix.astype(dtype)
        return self._cache[dtype]

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def nnz(self) -> int:
        return self.matrix.nnz


def spmm(adj: SparseAdjacency, x: Tensor) -> Tensor:
    """``adj @ x``; the adjacency is symmetric so the backward is ``adj @ g``."""
    if adj.n != x.rows:
        raise ShapeError(f"spmm: adjacency of size {adj.n} vs tensor shape {x.shape}")
    m = adj.as_dtype(x.dtype)
    return _record(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(m @ g),))


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(state.m):
        raise ShapeError("adam_step: parameter count differs from optimizer state")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)
