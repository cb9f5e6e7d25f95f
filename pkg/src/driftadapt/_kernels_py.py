"""Pure-numpy kernel implementations.

This module mirrors the signatures of the compiled core (``_core``) and is
used whenever the extension is unavailable or explicitly disabled. Every
kernel takes and returns C-contiguous float64 arrays.
"""

import numpy as np

NAME = "python"


def row_normalize_fwd(x):
    """Return (y, norms) with y[i] = x[i] / ||x[i]||.

    Zero-norm rows are reported by the caller; norms are returned untouched
    so the caller can locate the offending row.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms > 0.0, norms, 1.0)
    y = x / safe[:, None]
    return np.ascontiguousarray(y), norms


def row_normalize_bwd(g, y, norms):
    """Gradient of row normalization: (g - (g.y) y) / norm per row."""
    dots = np.einsum("ij,ij->i", g, y)
    gx = (g - dots[:, None] * y) / norms[:, None]
    return np.ascontiguousarray(gx)


def softmax_fwd(logits, scale):
    """Row softmax of scale*logits with max subtraction."""
    z = scale * logits
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return np.ascontiguousarray(p)


def softmax_bwd(g, p, scale):
    """Gradient through softmax_fwd w.r.t. the logits."""
    inner = np.einsum("ij,ij->i", g, p)
    gl = scale * p * (g - inner[:, None])
    return np.ascontiguousarray(gl)


def topk_pair_indicator(p, k, n):
    """Pairwise {-1, 0, +1} indicator from top-k / top-n prediction sets.

    +1 where the top-k sets of rows i and j intersect, -1 where the top-n
    sets are disjoint, 0 otherwise; diagonal forced to 0. Ties rank the
    lower class index first.
    """
    b = p.shape[0]
    # stable sort of -p: descending by value, ties keep lower class index
    order = np.argsort(-p, axis=1, kind="stable")
    rows = np.arange(b)[:, None]
    k_mask = np.zeros(p.shape, dtype=np.float64)
    k_mask[rows, order[:, :k]] = 1.0
    n_mask = np.zeros(p.shape, dtype=np.float64)
    n_mask[rows, order[:, :n]] = 1.0
    k_overlap = (k_mask @ k_mask.T) > 0.5
    n_overlap = (n_mask @ n_mask.T) > 0.5
    out = np.where(k_overlap, 1, np.where(n_overlap, 0, -1)).astype(np.int8)
    np.fill_diagonal(out, 0)
    return out


def row_entropy(p, eps):
    """Per-row entropy -sum p*log(max(p, eps)); diagnostics only."""
    return -np.einsum("ij,ij->i", p, np.log(np.maximum(p, eps)))


def sgd_momentum_update(theta, grad, vel, lr, momentum):
    """In-place classic momentum step: v = m*v + g; theta -= lr*v."""
    vel *= momentum
    vel += grad
    theta -= lr * vel
