"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every operation returns a new :class:`Tensor` holding its parents and a
closure that pushes the output gradient back to them. ``backward`` visits the
recorded graph in reverse topological order, so gradients are exact and the
summation order is fixed.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward needs a scalar output")
        order, seen = [], set()
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, tuple(parents) if needs else (), backward if needs else None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents = parents + (bias,)

    def back(g):
        grads = [g @ weight.data if x.requires_grad else None, g.T @ x.data]
        if bias is not None:
            grads.append(colsum(g))
        return grads

    return _result(out, parents, back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _result(out, (x,), lambda g: (g * (out > 0),))


def colsum(g: np.ndarray) -> np.ndarray:
    """Column sums via a BLAS matrix-vector product (much faster than ``sum(axis=0)`` here)."""
    return np.ones(g.shape[0]) @ g if g.shape[0] else np.zeros(g.shape[1:])


def channel_relu(own, src, matrix: sp.csr_matrix, weight, bias) -> Tensor:
    """``relu(concat([own, matrix @ src], 1) @ weight.T + bias)``.

    When ``matrix`` has fewer columns than rows the source rows are projected
    before aggregation, which is the same linear map at a lower cost.
    """
    own, src, weight, bias = as_tensor(own), as_tensor(src), as_tensor(weight), as_tensor(bias)
    d = own.shape[1]
    wa, wb = weight.data[:, :d], weight.data[:, d:]
    project_first = matrix.shape[1] < matrix.shape[0]
    out = own.data @ wa.T
    if project_first:
        out += matrix @ (src.data @ wb.T)
    else:
        agg = np.asarray(matrix @ src.data)
        out += agg @ wb.T
    out += bias.data
    np.maximum(out, 0.0, out=out)

    def back(g):
        gm = g * (out > 0)
        g_own = gm @ wa if own.requires_grad else None
        if project_first:
            gp = np.asarray(matrix.T @ gm)
            g_src = gp @ wb if src.requires_grad else None
            g_wb = gp.T @ src.data
        else:
            g_src = np.asarray(matrix.T @ (gm @ wb)) if src.requires_grad else None
            g_wb = gm.T @ agg
        g_w = np.concatenate([gm.T @ own.data, g_wb], axis=1)
        return g_own, g_src, g_w, colsum(gm)

    return _result(out, (own, src, weight, bias), back)


def concat(parts, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def spmm(matrix: sp.csr_matrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    return _result(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(matrix.T @ g),))


def total(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def select(x, index) -> Tensor:
    """Row/element selection ``x[index]`` (basic or integer indexing)."""
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), back)


def batch_norm(x, gamma, beta, mean_=None, var=None, eps: float = 1e-5):
    """Per-column normalisation.

    With ``mean_``/``var`` given they are used as constants (inference); else
    the biased batch statistics are used and returned for running averages.
    Returns ``(out, batch_mean, batch_var)``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mean_ is not None:
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean_) * inv
        out = xhat * gamma.data + beta.data

        def back_fixed(g):
            return (g * (gamma.data * inv), colsum(g * xhat), colsum(g))

        return _result(out, (x, gamma, beta), back_fixed), mean_, var
    n = x.shape[0]
    mu = colsum(x.data) / n
    xc = x.data - mu
    v = colsum(xc * xc) / n
    inv = 1.0 / np.sqrt(v + eps)
    out = xc * (inv * gamma.data)
    out += beta.data

    def back(g):
        xhat = xc * inv
        dxhat = g * gamma.data
        s_g, s_gx = colsum(g), colsum(g * xhat)
        dx = (inv / n) * (n * dxhat - s_g * gamma.data - xhat * (s_gx * gamma.data))
        return (dx, s_gx, s_g)

    return _result(out, (x, gamma, beta), back), mu, v


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood: sum_i w_yi * nll_i / sum_i w_yi."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    logp = log_softmax(logits.data)
    w = np.ones(n) if weights is None else np.asarray(weights, float)[targets]
    norm = w.sum()
    loss = -(w * logp[np.arange(n), targets]).sum() / norm

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1.0
        return (g * d * (w / norm)[:, None],)

    return _result(np.array(loss), (logits,), back)


def numeric_gradient(fn, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``fn()`` w.r.t. each array (modified in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            keep = arr[i]
            arr[i] = keep + h
            up = float(fn())
            arr[i] = keep - h
            down = float(fn())
            arr[i] = keep
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out
