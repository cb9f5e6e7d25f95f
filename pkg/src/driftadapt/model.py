"""Prototype classifiers, affine adapters, and the collaborating model pair.

The "encoder" here is an affine adapter over precomputed embeddings: it
preserves every gradient path the objectives exercise while staying cheap
enough for finite-difference verification. ``norm_only`` mode (scale and
shift only) stands in for methods that touch nothing but normalization
layers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    constant,
    cosine_similarity_matrix,
    scaled_softmax,
    transpose,
)


@dataclass
class EmbeddingDataset:
    """Labeled d-dimensional feature vectors for one domain."""

    dim: int
    n_classes: int
    embeddings: np.ndarray  # N x dim, float64
    labels: np.ndarray  # N, int64 in [0, n_classes)
    name: str = ""

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != self.dim:
            raise ValueError(
                f"embeddings must be Nx{self.dim}, got {self.embeddings.shape}"
            )
        if len(self.labels) != len(self.embeddings):
            raise ValueError("labels and embeddings length mismatch")
        if not np.isfinite(self.embeddings).all():
            raise ValueError("embeddings contain non-finite values")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)


class PrototypeClassifier:
    """Per-class mean vectors scored by scaled cosine similarity."""

    def __init__(self, prototypes: np.ndarray, logit_scale: float, trainable: bool = True):
        protos = np.ascontiguousarray(prototypes, dtype=np.float64)
        if protos.ndim != 2:
            raise ValueError("prototypes must be a CxD matrix")
        norms = np.sqrt((protos * protos).sum(axis=1))
        if norms.min() <= 0.0:
            raise ValueError(f"prototype for class {int(np.argmin(norms))} is the zero vector")
        if not (np.isfinite(logit_scale) and logit_scale > 0.0):
            raise ValueError(f"logit_scale must be finite and positive, got {logit_scale}")
        self.prototypes = Parameter(protos, name="prototypes")
        self.logit_scale = float(logit_scale)
        self.trainable = trainable

    @property
    def n_classes(self):
        return self.prototypes.rows

    @property
    def dim(self):
        return self.prototypes.cols

    def copy(self) -> "PrototypeClassifier":
        return PrototypeClassifier(
            self.prototypes.data.copy(), self.logit_scale, self.trainable
        )

    def trainable_parameters(self):
        return [self.prototypes] if self.trainable else []


class AffineAdapter:
    """Trainable map x -> gamma * (W x) + beta over embedding rows.

    Modes: ``full`` (W, gamma, beta all trainable), ``norm_only`` (gamma and
    beta only, W pinned at identity), ``frozen`` (identity transform, no
    gradients).
    """

    MODES = ("full", "norm_only", "frozen")

    def __init__(self, dim: int, mode: str = "full"):
        if mode not in self.MODES:
            raise ValueError(f"unknown adapter mode {mode!r}")
        self.dim = dim
        self.mode = mode
        grad = mode != "frozen"
        self.weight = Parameter(np.eye(dim), name="adapter.weight")
        self.gamma = Parameter(np.ones((1, dim)), name="adapter.gamma")
        self.beta = Parameter(np.zeros((1, dim)), name="adapter.beta")
        if not grad:
            for p in (self.weight, self.gamma, self.beta):
                p.requires_grad = False

    def forward(self, batch: Tensor) -> Tensor:
        # row form of gamma * (W x) + beta
        return (batch @ transpose(self.weight)) * self.gamma + self.beta

    def trainable_parameters(self):
        if self.mode == "full":
            return [self.weight, self.gamma, self.beta]
        if self.mode == "norm_only":
            return [self.gamma, self.beta]
        return []

    def all_parameters(self):
        return [self.weight, self.gamma, self.beta]

    def copy(self) -> "AffineAdapter":
        out = AffineAdapter(self.dim, self.mode)
        out.weight.data[:] = self.weight.data
        out.gamma.data[:] = self.gamma.data
        out.beta.data[:] = self.beta.data
        return out


@dataclass
class ModelPair:
    """Frozen-encoder source model plus the trainable target model."""

    ssl_adapter: AffineAdapter
    ssl_classifier: PrototypeClassifier
    target_adapter: AffineAdapter
    target_classifier: PrototypeClassifier

    def copy(self) -> "ModelPair":
        return ModelPair(
            self.ssl_adapter.copy(),
            self.ssl_classifier.copy(),
            self.target_adapter.copy(),
            self.target_classifier.copy(),
        )


def build_prototypes(
    source: EmbeddingDataset,
    logit_scale: float = 30.0,
    n_shot: int | None = None,
    seed: int = 0,
) -> PrototypeClassifier:
    """Class-mean prototypes from the source set, full or few-shot.

    Few-shot draws min(n_shot, class size) items per class uniformly
    without replacement; selected indices are sorted back into dataset
    order so that n_shot >= class size reproduces the full-shot prototype
    bit for bit. Classes are processed in ascending index order.
    """
    if n_shot is not None and n_shot < 1:
        raise ValueError(f"n_shot must be >= 1, got {n_shot}")
    rng = np.random.default_rng(seed)
    protos = np.empty((source.n_classes, source.dim))
    for c in range(source.n_classes):
        idx = np.flatnonzero(source.labels == c)
        if len(idx) == 0:
            raise ValueError(f"class {c} has no items in the source set")
        if n_shot is not None and n_shot < len(idx):
            idx = np.sort(rng.permutation(idx)[:n_shot])
        protos[c] = source.embeddings[idx].mean(axis=0)
        if not (protos[c] * protos[c]).sum() > 0.0:
            raise ValueError(f"class {c} prototype is the zero vector")
    return PrototypeClassifier(protos, logit_scale)


def predict(adapter: AffineAdapter, classifier: PrototypeClassifier, batch) -> Tensor:
    """Class probabilities: scaled softmax over cosine similarity to prototypes."""
    x = batch if isinstance(batch, Tensor) else constant(batch)
    feats = adapter.forward(x)
    sims = cosine_similarity_matrix(feats, classifier.prototypes)
    return scaled_softmax(sims, classifier.logit_scale)


def init_target_from_ssl(
    ssl_classifier: PrototypeClassifier,
    dim: int,
    adapter_mode: str = "full",
) -> ModelPair:
    """Target model as a value-equal copy of the source model.

    The source adapter is frozen at identity; the target adapter starts at
    identity with the requested mode, so both models predict identically
    before the first update.
    """
    if dim != ssl_classifier.dim:
        raise ValueError(
            f"dim {dim} does not match classifier prototype width {ssl_classifier.dim}"
        )
    ssl_adapter = AffineAdapter(dim, mode="frozen")
    target_adapter = AffineAdapter(dim, mode=adapter_mode)
    target_classifier = ssl_classifier.copy()
    return ModelPair(ssl_adapter, ssl_classifier, target_adapter, target_classifier)
