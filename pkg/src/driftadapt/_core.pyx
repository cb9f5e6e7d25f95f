# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Same contract as ``_kernels_py``: float64 C-contiguous arrays in, same
shapes out. Reductions run left to right within each row.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

NAME = "compiled"


def row_normalize_fwd(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] x):
    cdef Py_ssize_t b = x.shape[0], d = x.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] y = np.empty((b, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] norms = np.empty(b)
    cdef double s, inv
    for i in range(b):
        s = 0.0
        for j in range(d):
            s += x[i, j] * x[i, j]
        s = sqrt(s)
        norms[i] = s
        inv = 1.0 / s if s > 0.0 else 1.0
        for j in range(d):
            y[i, j] = x[i, j] * inv
    return y, norms


def row_normalize_bwd(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] g,
                      cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] y,
                      cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] norms):
    cdef Py_ssize_t b = g.shape[0], d = g.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] gx = np.empty((b, d))
    cdef double dot, inv
    for i in range(b):
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * y[i, j]
        inv = 1.0 / norms[i]
        for j in range(d):
            gx[i, j] = (g[i, j] - dot * y[i, j]) * inv
    return gx


def softmax_fwd(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] logits,
                double scale):
    cdef Py_ssize_t b = logits.shape[0], c = logits.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] p = np.empty((b, c))
    cdef double m, s, z
    for i in range(b):
        m = scale * logits[i, 0]
        for j in range(1, c):
            z = scale * logits[i, j]
            if z > m:
                m = z
        s = 0.0
        for j in range(c):
            z = exp(scale * logits[i, j] - m)
            p[i, j] = z
            s += z
        for j in range(c):
            p[i, j] /= s
    return p


def softmax_bwd(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] g,
                cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] p,
                double scale):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] gl = np.empty((b, c))
    cdef double inner
    for i in range(b):
        inner = 0.0
        for j in range(c):
            inner += g[i, j] * p[i, j]
        for j in range(c):
            gl[i, j] = scale * p[i, j] * (g[i, j] - inner)
    return gl


def topk_pair_indicator(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] p,
                        Py_ssize_t k, Py_ssize_t n):
    cdef Py_ssize_t b = p.shape[0], c = p.shape[1], i, j, m, t, best
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, mode="c"] k_mask = np.zeros((b, c), dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, mode="c"] n_mask = np.zeros((b, c), dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, mode="c"] taken = np.zeros((b, c), dtype=np.uint8)
    cdef cnp.ndarray[cnp.int8_t, ndim=2, mode="c"] out = np.zeros((b, b), dtype=np.int8)
    cdef double best_v
    cdef bint k_hit, n_hit
    # strict > scan keeps the lowest class index on ties
    for i in range(b):
        for m in range(n):
            best = -1
            best_v = 0.0
            for t in range(c):
                if taken[i, t]:
                    continue
                if best < 0 or p[i, t] > best_v:
                    best = t
                    best_v = p[i, t]
            taken[i, best] = 1
            n_mask[i, best] = 1
            if m < k:
                k_mask[i, best] = 1
    for i in range(b):
        for j in range(i + 1, b):
            k_hit = False
            n_hit = False
            for t in range(c):
                if k_mask[i, t] and k_mask[j, t]:
                    k_hit = True
                    break
            if k_hit:
                out[i, j] = 1
                out[j, i] = 1
                continue
            for t in range(c):
                if n_mask[i, t] and n_mask[j, t]:
                    n_hit = True
                    break
            if not n_hit:
                out[i, j] = -1
                out[j, i] = -1
    return out


def row_entropy(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] p, double eps):
    cdef Py_ssize_t b = p.shape[0], c = p.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] out = np.empty(b)
    cdef double s, v
    for i in range(b):
        s = 0.0
        for j in range(c):
            v = p[i, j]
            s += v * log(v if v > eps else eps)
        out[i] = -s
    return out


def sgd_momentum_update(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] theta,
                        cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] grad,
                        cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] vel,
                        double lr, double momentum):
    cdef Py_ssize_t r = theta.shape[0], c = theta.shape[1], i, j
    cdef double v
    for i in range(r):
        for j in range(c):
            v = momentum * vel[i, j]
            v = v + grad[i, j]
            vel[i, j] = v
            theta[i, j] = theta[i, j] - lr * v
