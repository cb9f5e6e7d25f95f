"""Objective terms for online adaptation.

The adaptation objective combines three parts: a pairwise-indicator
contrastive term over batch features, a feature-alignment distillation
term against the frozen source branch, and a mutual-learning pair (a
cross-entropy that refines the source classifier with target pseudo
labels, and a mutual-information term that feeds relational signal back
to the target model). Entropy-minimization and teacher-consistency
baselines live here too.

All losses are scalar tensors built on :mod:`driftadapt.autodiff`; each is
verified against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .autodiff import (
    LOG_EPS,
    Tensor,
    constant,
    detach,
    cosine_similarity_matrix,
    log_softmax_rows,
    matmul,
    pick_rows,
    row_l2norm,
    row_normalize,
    texp,
    tlog,
    transpose,
    tsum,
)


@dataclass
class PairIndicator:
    """Symmetric BxB matrix in {-1, 0, +1}; diagonal is always 0."""

    matrix: np.ndarray
    k: int
    n: int


@dataclass
class LossWeights:
    lambda_kd: float = 0.01
    lambda_ml: float = 0.4
    enable_cl: bool = True
    enable_kd: bool = True
    enable_ml: bool = True

    def validate(self):
        if self.lambda_kd < 0 or self.lambda_ml < 0:
            raise ValueError("loss weights must be non-negative")


def _probs_data(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.ascontiguousarray(p, dtype=np.float64)


def _require_prob_rows(data: np.ndarray, name: str):
    sums = data.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-6
    if bad.any():
        row = int(np.argmax(bad))
        raise ValueError(f"{name} row {row} is not a probability vector (sum={sums[row]!r})")


def pairwise_indicator(probs, k: int, n: int) -> PairIndicator:
    """Relate samples by overlap of their top-k / top-n prediction sets.

    +1 when the top-k sets intersect, -1 when even the top-n sets are
    disjoint, 0 for the ambiguous middle. Ties rank the lower class index
    first; self-pairs are never related.
    """
    data = _probs_data(probs)
    n_classes = data.shape[1]
    if not (1 <= k < n <= n_classes):
        raise ValueError(f"need 1 <= k < n <= {n_classes}, got k={k}, n={n}")
    return PairIndicator(backend.K.topk_pair_indicator(data, k, n), k, n)


def _masked_log_softmax(sim: Tensor) -> Tensor:
    """Row log-softmax of a BxB similarity matrix with self excluded.

    Diagonal entries of the result are meaningless (they carry the raw
    shifted similarity) and must be zero-weighted by the caller.
    """
    b = sim.rows
    off_diag = 1.0 - np.eye(b)
    masked = np.where(off_diag > 0, sim.data, -np.inf)
    # detached row max: exact for logsumexp gradients
    m = constant(masked.max(axis=1, keepdims=True))
    shifted = sim - m
    denom = tsum(texp(shifted) * constant(off_diag), axis=1)
    return shifted - tlog(denom)


def contrastive_loss(features: Tensor, ind: PairIndicator, mode: str = "separated") -> Tensor:
    """Pull together positive pairs and push apart negatives.

    ``separated`` normalizes the positive and negative sums of each row
    independently and averages over rows that have at least one related
    pair. ``literal`` uses the raw indicator-weighted form with weight
    1/sum_j(ind) per row, skipping rows whose indicator sum is <= 0.
    Returns an exact zero when no row contributes.
    """
    if features.rows < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    mat = ind.matrix
    if mat.shape != (features.rows, features.rows):
        raise ValueError("indicator shape does not match batch size")

    pos = mat == 1
    neg = mat == -1
    weights = np.zeros(mat.shape)
    if mode == "separated":
        p_counts = pos.sum(axis=1)
        n_counts = neg.sum(axis=1)
        n_active = int(((p_counts > 0) | (n_counts > 0)).sum())
        if n_active == 0:
            return constant(0.0)
        weights = np.where(pos, -1.0 / np.maximum(p_counts, 1)[:, None], 0.0)
        weights += np.where(neg, 1.0 / np.maximum(n_counts, 1)[:, None], 0.0)
        weights /= n_active
    elif mode == "literal":
        row_sums = mat.sum(axis=1).astype(np.float64)
        valid = row_sums > 0
        if not valid.any():
            return constant(0.0)
        weights[valid] = -mat[valid] / row_sums[valid, None]
    else:
        raise ValueError(f"unknown contrastive mode {mode!r}")

    sims = cosine_similarity_matrix(features, features)
    log_sm = _masked_log_softmax(sims)
    return tsum(constant(weights) * log_sm)


def kd_loss(target_feats: Tensor, ssl_feats: Tensor) -> Tensor:
    """Mean euclidean distance between unit-normalized feature rows.

    The source side is detached: gradient flows into the target features
    only, anchoring their directions to the frozen representation.
    """
    if target_feats.shape != ssl_feats.shape:
        raise ValueError(
            f"feature shape mismatch: {target_feats.shape} vs {ssl_feats.shape}"
        )
    t_norm = row_normalize(target_feats, what="target features")
    s_norm = row_normalize(detach(ssl_feats), what="source features")
    dists = row_l2norm(t_norm - s_norm)
    return tsum(dists) * (1.0 / target_feats.rows)


def mutual_information(p, q) -> Tensor:
    """Mutual information of the symmetrized joint of two soft labelings.

    Joint is the batch-mean outer product of the probability rows,
    symmetrized and renormalized; logs are floored so empty cells are
    safe. Non-negative up to floor-induced rounding.
    """
    p = p if isinstance(p, Tensor) else constant(p)
    q = q if isinstance(q, Tensor) else constant(q)
    _require_prob_rows(p.data, "p")
    _require_prob_rows(q.data, "q")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    b = p.rows
    joint = matmul(transpose(p), q) * (1.0 / b)
    joint = (joint + transpose(joint)) * 0.5
    joint = joint / tsum(joint)
    row_marg = tsum(joint, axis=1)
    col_marg = tsum(joint, axis=0)
    return tsum(joint * (tlog(joint) - tlog(row_marg) - tlog(col_marg)))


def mutual_learning_loss(p_ssl: Tensor, p_t: Tensor, mi_sign: str = "maximize",
                         pseudo_labels: np.ndarray | None = None,
                         ssl_logits: Tensor | None = None, scale: float = 1.0):
    """Collaborative pair of losses for the two models.

    Returns (ssl_term, target_term). ssl_term is the cross entropy of the
    source-branch probabilities against the target model's argmax pseudo
    labels (gradients reach the source classifier only). target_term is
    the mutual information between target probabilities and detached
    source probabilities, negated by default so that minimizing the total
    maximizes the shared information; ``literal`` keeps the positive sign.

    pseudo_labels default to argmax of the (detached) target rows; they
    are step constants, so gradient checks may pin them explicitly. When
    the source probabilities come from a scaled softmax, pass the raw
    ``ssl_logits`` and ``scale`` so the cross entropy runs in fused
    log-softmax form (exact gradients even for near-zero probabilities).
    """
    _require_prob_rows(p_ssl.data, "p_ssl")
    _require_prob_rows(p_t.data, "p_t")
    if mi_sign not in ("maximize", "literal"):
        raise ValueError(f"unknown mi_sign {mi_sign!r}")
    b = p_t.rows
    pseudo = np.argmax(p_t.data, axis=1) if pseudo_labels is None else pseudo_labels
    if ssl_logits is not None:
        log_p = pick_rows(log_softmax_rows(ssl_logits, scale), pseudo)
    else:
        log_p = tlog(pick_rows(p_ssl, pseudo))
    ssl_term = tsum(log_p) * (-1.0 / b)
    mi = mutual_information(p_t, detach(p_ssl))
    target_term = mi * (-1.0 if mi_sign == "maximize" else 1.0)
    return ssl_term, target_term


def total_loss(cl, kd, ml, w: LossWeights) -> Tensor:
    """Weighted sum of the enabled terms; disabled terms contribute nothing."""
    w.validate()
    parts = []
    if w.enable_cl and cl is not None:
        parts.append(cl)
    if w.enable_kd and kd is not None:
        parts.append(kd * w.lambda_kd)
    if w.enable_ml and ml is not None:
        parts.append(ml * w.lambda_ml)
    if not parts:
        return constant(0.0)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def entropy_loss(probs: Tensor, logits: Tensor | None = None, scale: float = 1.0) -> Tensor:
    """Mean Shannon entropy of prediction rows (the EM objective).

    With ``logits`` given, the log runs in fused log-softmax form.
    """
    _require_prob_rows(probs.data, "probs")
    log_p = tlog(probs) if logits is None else log_softmax_rows(logits, scale)
    return tsum(probs * log_p) * (-1.0 / probs.rows)


def consistency_loss(student_probs: Tensor, teacher_probs,
                     student_logits: Tensor | None = None, scale: float = 1.0) -> Tensor:
    """Cross entropy of student rows against teacher argmax pseudo labels."""
    _require_prob_rows(student_probs.data, "student")
    teacher = _probs_data(teacher_probs)
    _require_prob_rows(teacher, "teacher")
    if teacher.shape != student_probs.shape:
        raise ValueError("student/teacher shape mismatch")
    pseudo = np.argmax(teacher, axis=1)
    if student_logits is not None:
        log_p = pick_rows(log_softmax_rows(student_logits, scale), pseudo)
    else:
        log_p = tlog(pick_rows(student_probs, pseudo))
    return tsum(log_p) * (-1.0 / student_probs.rows)


def batch_entropy(probs: np.ndarray) -> np.ndarray:
    """Per-sample entropy diagnostic (no gradient)."""
    return backend.K.row_entropy(np.ascontiguousarray(probs), LOG_EPS)
