"""Reverse-mode autodiff over dense float64 matrices.

Everything is a 2-D C-contiguous array wrapped in a :class:`Tensor`
(scalars are 1x1). Ops build a graph of backward closures; ``backward()``
walks it in reverse topological order and accumulates gradients into the
participating :class:`Parameter` leaves. Intermediate gradients live in a
per-call dict, so calling ``backward`` twice accumulates additively into
parameter grads without double-counting through the interior of the graph.

The heavy kernels (row normalization, scaled softmax) are dispatched
through :mod:`driftadapt.backend`.

Numerical conventions, used package-wide:
  * ``LOG_EPS = 1e-8`` floors every log argument (and the denominators of
    the singular backward paths that mirror them).
  * losses are scalar tensors; ``.value`` reads them out.
"""

from __future__ import annotations

import numpy as np

from . import backend

LOG_EPS = 1e-8


def _as_matrix(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got {arr.ndim}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else _as_matrix(data)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def value(self) -> float:
        if self.data.shape != (1, 1):
            raise ValueError(f"value requires a scalar tensor, got shape {self.data.shape}")
        return float(self.data[0, 0])

    def backward(self):
        """Accumulate d(self)/d(param) into every reachable Parameter's grad."""
        if self.data.shape != (1, 1):
            raise ValueError("backward requires a scalar tensor")
        order = _toposort(self)
        grads = {id(self): np.ones((1, 1))}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            node._backward(g, grads)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; float operands become constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf: owns a zero-initialized gradient buffer."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name=""):
        super().__init__(_as_matrix(data), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def reset_grad(self):
        self.grad[:] = 0.0

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.data.shape})"


def constant(data) -> Tensor:
    return Tensor(_as_matrix(data))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
    return order


def _accumulate(t: Tensor, g: np.ndarray, grads: dict):
    if isinstance(t, Parameter):
        t.grad += g
    elif t.requires_grad:
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the operand's (possibly size-1) shape."""
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g, a.data.shape), grads)
        _accumulate(b, _unbroadcast(g, b.data.shape), grads)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g, a.data.shape), grads)
        _accumulate(b, _unbroadcast(-g, b.data.shape), grads)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape), grads)
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape), grads)

    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape), grads)
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), grads)

    return _make(a.data / b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(a, g @ b.data.T, grads)
        _accumulate(b, a.data.T @ g, grads)

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(a, np.ascontiguousarray(g.T), grads)

    return _make(np.ascontiguousarray(a.data.T), (a,), bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    """Sum to a scalar, or along an axis with keepdims."""
    if axis is None:
        out = a.data.sum().reshape(1, 1)
    else:
        out = a.data.sum(axis=axis, keepdims=True)

    def bwd(g, grads):
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy(), grads)

    return _make(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    return tsum(a) * constant(1.0 / a.data.size)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g, grads):
        _accumulate(a, g * out, grads)

    return _make(out, (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    """log with the package-wide floor: log(max(x, LOG_EPS)).

    Below the floor the forward is flat, so the gradient there is zero.
    """
    floored = np.maximum(a.data, LOG_EPS)

    def bwd(g, grads):
        _accumulate(a, np.where(a.data > LOG_EPS, g / floored, 0.0), grads)

    return _make(np.log(floored), (a,), bwd)


def row_l2norm(a: Tensor) -> Tensor:
    """Per-row euclidean norm, Bx1. Backward floors the norm at LOG_EPS."""
    norms = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))[:, None]

    def bwd(g, grads):
        _accumulate(a, g * a.data / np.maximum(norms, LOG_EPS), grads)

    return _make(norms, (a,), bwd)


def row_normalize(a: Tensor, what="matrix") -> Tensor:
    """Rows scaled to unit norm; raises on a zero-norm row, naming it."""
    y, norms = backend.K.row_normalize_fwd(a.data)
    if norms.min() <= 0.0:
        row = int(np.argmin(norms))
        raise ValueError(f"{what} row {row} has zero norm; cannot normalize")

    def bwd(g, grads):
        _accumulate(a, backend.K.row_normalize_bwd(np.ascontiguousarray(g), y, norms), grads)

    return _make(y, (a,), bwd)


def scaled_softmax(logits: Tensor, scale: float) -> Tensor:
    """Row softmax of scale*logits, max-subtracted for stability."""
    if not np.isfinite(scale):
        raise ValueError(f"softmax scale must be finite, got {scale}")
    p = backend.K.softmax_fwd(logits.data, float(scale))

    def bwd(g, grads):
        _accumulate(logits, backend.K.softmax_bwd(np.ascontiguousarray(g), p, float(scale)), grads)

    return _make(p, (logits,), bwd)


def log_softmax_rows(logits: Tensor, scale: float) -> Tensor:
    """Fused log of scaled_softmax: scale*l - logsumexp(scale*l) per row.

    The inner log argument is a sum of exps that is always >= 1, so the
    package-wide log floor is trivially respected while the gradient keeps
    the exact softmax-cross-entropy form scale*(g - p * rowsum(g)).
    """
    if not np.isfinite(scale):
        raise ValueError(f"softmax scale must be finite, got {scale}")
    p = backend.K.softmax_fwd(logits.data, float(scale))
    z = float(scale) * logits.data
    m = z.max(axis=1, keepdims=True)
    logp = (z - m) - np.log(np.exp(z - m).sum(axis=1, keepdims=True))

    def bwd(g, grads):
        inner = g.sum(axis=1, keepdims=True)
        _accumulate(logits, float(scale) * (g - p * inner), grads)

    return _make(logp, (logits,), bwd)


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between rows of a (nxd) and b (mxd)."""
    if a.cols != b.cols:
        raise ValueError(f"dimension mismatch: {a.cols} vs {b.cols}")
    return matmul(row_normalize(a, what="left matrix"),
                  transpose(row_normalize(b, what="right matrix")))


def pick_rows(p: Tensor, idx: np.ndarray) -> Tensor:
    """Gather p[i, idx[i]] as a Bx1 column."""
    rows = np.arange(p.rows)
    out = p.data[rows, idx][:, None].copy()

    def bwd(g, grads):
        gp = np.zeros_like(p.data)
        gp[rows, idx] = g[:, 0]
        _accumulate(p, gp, grads)

    return _make(out, (p,), bwd)


def detach(x: Tensor) -> Tensor:
    """Value-equal constant copy; backward propagates exactly zero through it."""
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(loss_fn, params, h: float) -> float:
    """Compare analytic gradients of loss_fn against central differences.

    Returns the max over all parameter entries of
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.
    loss_fn must be pure and deterministic in the parameter values.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    for p in params:
        p.reset_grad()
    loss = loss_fn(params)
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    def probe(p, i, j, shifted):
        orig = p.data[i, j]
        p.data[i, j] = shifted
        try:
            v = loss_fn(params).value
        finally:
            p.data[i, j] = orig
        if not np.isfinite(v):
            raise ArithmeticError(
                f"non-finite loss while probing parameter {p.name or '?'}[{i},{j}]"
            )
        return v

    worst = 0.0
    for p, a_grad in zip(params, analytic):
        rows, cols = p.data.shape
        for i in range(rows):
            for j in range(cols):
                theta = p.data[i, j]
                f_plus = probe(p, i, j, theta + h)
                f_minus = probe(p, i, j, theta - h)
                central = (f_plus - f_minus) / (2.0 * h)
                a = a_grad[i, j]
                rel = abs(a - central) / max(abs(a), abs(central), 1e-8)
                worst = max(worst, rel)
    return worst
