"""Synthetic drifting-domain suites, dataset files, and stream assembly.

All randomness flows through numpy's PCG64 via ``default_rng`` seeded from
explicit integer lists, so suites are byte-reproducible across runs and
platforms. Streams keep their evaluation labels in a separate channel
(``eval_labels``) that adaptation code never receives.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .model import EmbeddingDataset

_SOURCE_STREAM = 0x50
_DOMAIN_STREAM = 0xD0
_SHUFFLE_STREAM = 0x5F

TRANSFORM_KINDS = ("rotation", "mean_shift", "per_dim_scale", "additive_noise")

# severity-5 transform magnitudes; calibrated in the pilot so that frozen
# models degrade by a margin online adaptation can realistically win back
MAX_ROTATION_DEG = 75.0
MAX_NOISE_STD = 1.0
MAX_MEAN_SHIFT = 14.0
MAX_LOG_SCALE = math.log(3.0)

# per-domain magnitude wobble: same-kind domains share their seeded
# structure (a corruption "family") and differ by strength
WOBBLE_LOW = 0.7


class DatasetFormatError(ValueError):
    pass


@dataclass
class Domain:
    """One target domain: ordered unlabeled batches plus hidden labels."""

    name: str
    batches: list  # list of Bxd float64 arrays, handed to adaptation
    eval_labels: list  # list of B int64 arrays, used only for scoring

    @property
    def n_samples(self):
        return sum(len(b) for b in self.batches)


@dataclass
class DomainStream:
    domains: list

    @property
    def dim(self):
        return self.domains[0].batches[0].shape[1]


@dataclass
class SyntheticSuiteConfig:
    """Desk-scale analogue of a corruption benchmark over embeddings."""

    n_classes: int = 10
    dim: int = 32
    class_separation: float = 2.5  # distance between class means, in within-class stds
    samples_per_domain: int = 2000
    n_domains: int = 15
    severity: int = 5  # 0 (identity) to 5 (full magnitude)
    seed: int = 0
    batch_size: int = 64
    transform_kinds: tuple = TRANSFORM_KINDS
    source_samples_per_class: int = 200

    def validate(self):
        if self.n_classes < 2 or self.dim < 2:
            raise ValueError("need n_classes >= 2 and dim >= 2")
        if self.n_classes > self.dim:
            raise ValueError(
                f"synthetic generator places class means on orthogonal axes; "
                f"need n_classes <= dim, got C={self.n_classes}, d={self.dim}"
            )
        if self.class_separation <= 0:
            raise ValueError("class_separation must be > 0")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must lie in 0..5, got {self.severity}")
        if self.samples_per_domain < 1 or self.n_domains < 1 or self.batch_size < 1:
            raise ValueError("sizes must be positive")
        if self.source_samples_per_class < 1:
            raise ValueError("source_samples_per_class must be positive")
        bad = [k for k in self.transform_kinds if k not in TRANSFORM_KINDS]
        if bad or not self.transform_kinds:
            raise ValueError(f"unknown transform kinds: {bad}")


def _class_means(cfg: SyntheticSuiteConfig) -> np.ndarray:
    # scaled one-hot axes: every pair of means is exactly class_separation apart
    means = np.zeros((cfg.n_classes, cfg.dim))
    scale = cfg.class_separation / math.sqrt(2.0)
    means[np.arange(cfg.n_classes), np.arange(cfg.n_classes)] = scale
    return means


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    """Per-class counts balanced within +-1, ordered by class index."""
    base, extra = divmod(n, n_classes)
    counts = [base + (1 if c < extra else 0) for c in range(n_classes)]
    return np.repeat(np.arange(n_classes), counts)


def _family_structures(cfg: SyntheticSuiteConfig) -> dict:
    """Per-kind seeded structure shared by all domains of that kind.

    Mirrors corruption families: domains of one kind are drawn from one
    family (same rotation planes, shift direction, scale profile) and
    differ in strength, so the stream drifts rather than teleports.
    """
    out = {}
    for kind in cfg.transform_kinds:
        rng = np.random.default_rng([cfg.seed, _DOMAIN_STREAM, _kind_tag(kind)])
        if kind == "rotation":
            out[kind] = rng.permutation(cfg.dim)
        elif kind == "mean_shift":
            direction = rng.normal(size=cfg.dim)
            out[kind] = direction / np.linalg.norm(direction)
        elif kind == "per_dim_scale":
            out[kind] = rng.uniform(-1.0, 1.0, size=cfg.dim)
        else:  # additive_noise: no shared structure, fresh draws per domain
            out[kind] = None
    return out


def _kind_tag(kind: str) -> int:
    return TRANSFORM_KINDS.index(kind) + 1


def _make_transform(kind: str, severity: int, dim: int, rng: np.random.Generator,
                    structure=None, wobble: float = 1.0):
    """Seeded domain transform; magnitude scales linearly with severity.

    ``wobble`` in (0, 1] varies the strength so same-family domains stay
    distinct transforms.
    """
    s = (severity / 5.0) * wobble
    if kind == "rotation":
        angle = math.radians(s * MAX_ROTATION_DEG)
        axes = structure if structure is not None else rng.permutation(dim)
        cos_a, sin_a = math.cos(angle), math.sin(angle)

        def rotate(x):
            out = x.copy()
            for i in range(0, dim - 1, 2):
                a, b = axes[i], axes[i + 1]
                xa, xb = out[:, a].copy(), out[:, b].copy()
                out[:, a] = cos_a * xa - sin_a * xb
                out[:, b] = sin_a * xa + cos_a * xb
            return out

        return rotate
    if kind == "additive_noise":
        std = s * MAX_NOISE_STD
        return lambda x: x + rng.normal(0.0, 1.0, x.shape) * std
    if kind == "mean_shift":
        direction = structure if structure is not None else None
        if direction is None:
            direction = rng.normal(size=dim)
            direction /= np.linalg.norm(direction)
        shift = direction * (s * MAX_MEAN_SHIFT)
        return lambda x: x + shift
    if kind == "per_dim_scale":
        u = structure if structure is not None else rng.uniform(-1.0, 1.0, size=dim)
        factors = np.exp(u * (s * MAX_LOG_SCALE))
        return lambda x: x * factors
    raise ValueError(f"unknown transform kind {kind!r}")


def generate_synthetic_datasets(cfg: SyntheticSuiteConfig):
    """Build (source dataset, ordered domain datasets) from class Gaussians.

    Each domain draws fresh samples from the source distribution and pushes
    them through one seeded transform. Deterministic in (cfg, cfg.seed).
    """
    cfg.validate()
    means = _class_means(cfg)

    src_rng = np.random.default_rng([cfg.seed, _SOURCE_STREAM])
    src_labels = _balanced_labels(cfg.source_samples_per_class * cfg.n_classes, cfg.n_classes)
    src_x = means[src_labels] + src_rng.normal(size=(len(src_labels), cfg.dim))
    source = EmbeddingDataset(cfg.dim, cfg.n_classes, src_x, src_labels, name="source")

    structures = _family_structures(cfg)
    datasets = []
    for di in range(cfg.n_domains):
        kind = cfg.transform_kinds[di % len(cfg.transform_kinds)]
        rng = np.random.default_rng([cfg.seed, _DOMAIN_STREAM, di])
        labels = _balanced_labels(cfg.samples_per_domain, cfg.n_classes)
        x = means[labels] + rng.normal(size=(len(labels), cfg.dim))
        wobble = float(rng.uniform(WOBBLE_LOW, 1.0))
        transform = _make_transform(kind, cfg.severity, cfg.dim, rng,
                                    structure=structures[kind], wobble=wobble)
        datasets.append(
            EmbeddingDataset(
                cfg.dim, cfg.n_classes, transform(x), labels,
                name=f"{di:02d}_{kind}_s{cfg.severity}",
            )
        )
    return source, datasets


def generate_synthetic_suite(cfg: SyntheticSuiteConfig):
    """Like generate_synthetic_datasets, but with domains batched into a stream."""
    source, datasets = generate_synthetic_datasets(cfg)
    stream = assemble_stream(datasets, cfg.batch_size, seed=[cfg.seed, _SHUFFLE_STREAM])
    return source, stream


def assemble_stream(datasets, batch_size: int, seed) -> DomainStream:
    """One domain per dataset; items shuffled, final partial batch kept."""
    if not datasets:
        raise ValueError("no datasets")
    dim = datasets[0].dim
    for ds in datasets:
        if ds.dim != dim:
            raise ValueError(f"dimension mismatch: {ds.name or 'dataset'} has dim {ds.dim}, expected {dim}")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(seed)
    domains = []
    for ds in datasets:
        perm = rng.permutation(len(ds))
        x = ds.embeddings[perm]
        y = ds.labels[perm]
        batches = [np.ascontiguousarray(x[i:i + batch_size]) for i in range(0, len(ds), batch_size)]
        labels = [y[i:i + batch_size].copy() for i in range(0, len(ds), batch_size)]
        domains.append(Domain(ds.name, batches, labels))
    return DomainStream(domains)


# ---------------------------------------------------------------------------
# dataset files: line-oriented text, `dim=<d> classes=<C>` header, then
# `label,v0,v1,...` rows; '#' starts a comment. Floats use repr round-trip.


def save_embedding_dataset(ds: EmbeddingDataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={ds.dim} classes={ds.n_classes}\n")
        for label, row in zip(ds.labels, ds.embeddings):
            fh.write(str(int(label)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def load_embedding_dataset(path, name: str = "") -> EmbeddingDataset:
    if not os.path.exists(path):
        raise DatasetFormatError(f"dataset file not found: {path}")
    dim = n_classes = None
    rows, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if dim is None:
                try:
                    parts = dict(p.split("=", 1) for p in line.split())
                    dim = int(parts["dim"])
                    n_classes = int(parts["classes"])
                except (ValueError, KeyError) as exc:
                    raise DatasetFormatError(
                        f"{path}: line {ln}: bad header {line!r} "
                        f"(expected 'dim=<d> classes=<C>')"
                    ) from exc
                if dim < 1 or n_classes < 2:
                    raise DatasetFormatError(f"{path}: line {ln}: invalid dim/classes")
                continue
            fields = line.split(",")
            if len(fields) != dim + 1:
                raise DatasetFormatError(
                    f"{path}: line {ln}: expected {dim} values after the label, "
                    f"got {len(fields) - 1}"
                )
            try:
                label = int(fields[0])
                values = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {ln}: non-numeric entry") from exc
            if label < 0:
                raise DatasetFormatError(f"{path}: line {ln}: negative label {label}")
            if label >= n_classes:
                raise DatasetFormatError(
                    f"{path}: line {ln}: label {label} out of range for {n_classes} classes"
                )
            if not all(math.isfinite(v) for v in values):
                raise DatasetFormatError(f"{path}: line {ln}: non-finite value")
            labels.append(label)
            rows.append(values)
    if dim is None:
        raise DatasetFormatError(f"{path}: missing header line")
    return EmbeddingDataset(dim, n_classes, np.array(rows, dtype=np.float64).reshape(len(rows), dim),
                            np.array(labels, dtype=np.int64), name=name)


# ---------------------------------------------------------------------------
# suite manifest: JSON naming the source file and the ordered domain files


def save_suite(source: EmbeddingDataset, datasets, out_dir, manifest_name="suite.json"):
    os.makedirs(out_dir, exist_ok=True)
    save_embedding_dataset(source, os.path.join(out_dir, "source.txt"))
    entries = []
    for i, ds in enumerate(datasets):
        fname = f"domain_{i:02d}.txt"
        save_embedding_dataset(ds, os.path.join(out_dir, fname))
        entries.append({"name": ds.name or f"domain_{i:02d}", "path": fname})
    manifest = {"source": "source.txt", "domains": entries}
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_suite(manifest_path):
    """Returns (source dataset, ordered list of domain datasets)."""
    if not os.path.exists(manifest_path):
        raise DatasetFormatError(f"manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    source = load_embedding_dataset(os.path.join(base, manifest["source"]), name="source")
    datasets = [
        load_embedding_dataset(os.path.join(base, entry["path"]), name=entry["name"])
        for entry in manifest["domains"]
    ]
    return source, datasets
