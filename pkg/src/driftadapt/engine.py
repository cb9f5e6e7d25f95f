"""Online continual adaptation loop.

Protocol: for every incoming batch the current model predicts first, then
updates; state carries across domain boundaries with no resets. The
adaptation code path (``adapt_step`` and everything below it) never sees
evaluation labels; scoring happens afterwards against the stream's hidden
label channel.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import backend
from .autodiff import constant, cosine_similarity_matrix, scaled_softmax
from .data import DomainStream
from .losses import (
    LossWeights,
    batch_entropy,
    consistency_loss,
    contrastive_loss,
    entropy_loss,
    kd_loss,
    mutual_learning_loss,
    pairwise_indicator,
    total_loss,
)
from .model import EmbeddingDataset, ModelPair

_ENGINE_STREAM = 0xADA9

METHODS = ("none", "em", "cr", "aws")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class MethodConfig:
    """Everything a run needs besides the optimizer and the stream."""

    method: str = "aws"
    weights: LossWeights = field(default_factory=LossWeights)
    k: int = 1
    n: int = 5
    sigma: float = 30.0
    ema_alpha: float = 0.999
    cr_jitter_std: float = 0.05
    indicator_source: str = "target"  # target | ssl
    mi_sign: str = "maximize"  # maximize | literal
    cl_mode: str = "separated"  # separated | literal
    update_ssl_classifier: bool = True
    update_ssl_encoder: bool = False  # ablation only: EMA the frozen encoder
    eval_model: str = "target"  # target | ssl | ensemble
    adapter_mode: str = "full"  # target adapter: full | norm_only

    def validate(self, n_classes: int):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (1 <= self.k < self.n <= n_classes):
            raise ValueError(
                f"need 1 <= k < n <= n_classes, got k={self.k}, n={self.n}, C={n_classes}"
            )
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        if self.cr_jitter_std < 0:
            raise ValueError("cr_jitter_std must be >= 0")
        if self.indicator_source not in ("target", "ssl"):
            raise ValueError(f"unknown indicator_source {self.indicator_source!r}")
        if self.mi_sign not in ("maximize", "literal"):
            raise ValueError(f"unknown mi_sign {self.mi_sign!r}")
        if self.cl_mode not in ("separated", "literal"):
            raise ValueError(f"unknown cl_mode {self.cl_mode!r}")
        if self.eval_model not in ("target", "ssl", "ensemble"):
            raise ValueError(f"unknown eval_model {self.eval_model!r}")
        if self.adapter_mode not in ("full", "norm_only"):
            raise ValueError(f"unknown adapter_mode {self.adapter_mode!r}")
        self.weights.validate()


class OptimizerState:
    """Classic SGD momentum state over an explicit parameter list."""

    def __init__(self, params, learning_rate: float, momentum: float = 0.9):
        if learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}


def resolve_learning_rate(base_lr: float, batch_size: int, scale_with_batch: bool = True) -> float:
    """Linear batch-size scaling rule: base_lr * batch_size / 64."""
    return base_lr * batch_size / 64.0 if scale_with_batch else base_lr


def sgd_momentum_step(params, opt: OptimizerState):
    """v <- m*v + g; theta <- theta - lr*v; grads reset to zero after."""
    for p in params:
        if p.grad.shape != p.data.shape:
            raise ValueError(f"grad shape {p.grad.shape} != param shape {p.data.shape}")
        backend.K.sgd_momentum_update(
            p.data, p.grad, opt.velocity[id(p)], opt.learning_rate, opt.momentum
        )
        p.reset_grad()


def ema_update(teacher_params, student_params, alpha: float):
    """t <- alpha*t + (1-alpha)*s, element-wise over aligned parameter lists."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    for t, s in zip(teacher_params, student_params):
        t.data *= alpha
        t.data += (1.0 - alpha) * s.data


@dataclass
class StepRecord:
    domain_index: int
    batch_index: int
    predictions: np.ndarray  # pre-update, from the evaluated model
    pseudo_labels: np.ndarray  # supervision signal actually used this step
    entropy_per_sample: np.ndarray
    wall_time: float
    true_labels: Optional[np.ndarray] = None  # filled by scoring only
    pseudo_label_correct: Optional[np.ndarray] = None


@dataclass
class DomainResult:
    name: str
    error: float  # percent
    n_samples: int


@dataclass
class RunData:
    """Raw output of one online run, before report formatting."""

    method: str
    seed: int
    config: MethodConfig
    records: list
    per_domain: list
    mean_error: float
    domain_start_hashes: list
    domain_end_hashes: list
    ssl_adapter_hash_start: str
    ssl_adapter_hash_end: str
    wall_time_total: float


def trainable_params(pair: ModelPair, cfg: MethodConfig):
    """Parameter list each method is allowed to update."""
    if cfg.method == "none":
        return []
    if cfg.method == "em":
        # normalization-style update: scale and shift of the target adapter
        return [pair.target_adapter.gamma, pair.target_adapter.beta]
    params = pair.target_adapter.trainable_parameters() + pair.target_classifier.trainable_parameters()
    if cfg.method == "aws" and cfg.update_ssl_classifier:
        params += pair.ssl_classifier.trainable_parameters()
    return params


def all_parameters(pair: ModelPair):
    return (
        pair.ssl_adapter.all_parameters()
        + [pair.ssl_classifier.prototypes]
        + pair.target_adapter.all_parameters()
        + [pair.target_classifier.prototypes]
    )


def hash_params(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


class _Teacher:
    """EMA copy of the target model used by the consistency baseline."""

    def __init__(self, pair: ModelPair):
        self.adapter = pair.target_adapter.copy()
        self.classifier = pair.target_classifier.copy()
        for p in self.adapter.all_parameters() + [self.classifier.prototypes]:
            p.requires_grad = False

    def params(self):
        return self.adapter.all_parameters() + [self.classifier.prototypes]

    def probs(self, batch: np.ndarray, sigma: float) -> np.ndarray:
        x = constant(batch)
        feats = self.adapter.forward(x)
        sims = cosine_similarity_matrix(feats, self.classifier.prototypes)
        return scaled_softmax(sims, sigma).data


def _forward(adapter, classifier, x, sigma):
    feats = adapter.forward(x)
    sims = cosine_similarity_matrix(feats, classifier.prototypes)
    return feats, sims, scaled_softmax(sims, sigma)


def adapt_step(
    pair: ModelPair,
    batch: np.ndarray,
    cfg: MethodConfig,
    opt: OptimizerState,
    rng: np.random.Generator,
    teacher: Optional[_Teacher] = None,
    domain_index: int = 0,
    batch_index: int = 0,
) -> StepRecord:
    """Predict on the raw batch, then update per the configured method.

    Receives feature batches only; evaluation labels are invisible here.
    """
    t0 = time.perf_counter()
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ValueError("empty batch")
    x = constant(batch)

    f_t, sims_t, p_t = _forward(pair.target_adapter, pair.target_classifier, x, cfg.sigma)
    f_ssl = sims_ssl = p_ssl = None
    if cfg.method == "aws" or cfg.eval_model in ("ssl", "ensemble"):
        f_ssl, sims_ssl, p_ssl = _forward(pair.ssl_adapter, pair.ssl_classifier, x, cfg.sigma)

    # predictions are recorded strictly before any parameter update
    if cfg.eval_model == "target":
        eval_probs = p_t.data
    elif cfg.eval_model == "ssl":
        eval_probs = p_ssl.data
    else:
        eval_probs = 0.5 * (p_t.data + p_ssl.data)
    predictions = np.argmax(eval_probs, axis=1)
    entropies = batch_entropy(eval_probs)
    pseudo_labels = np.argmax(p_t.data, axis=1)

    loss = None
    if cfg.method == "em":
        loss = entropy_loss(p_t, logits=sims_t, scale=cfg.sigma)
    elif cfg.method == "cr":
        views = [
            teacher.probs(batch + rng.normal(0.0, cfg.cr_jitter_std, batch.shape), cfg.sigma)
            for _ in range(2)
        ]
        teacher_probs = 0.5 * (views[0] + views[1])
        pseudo_labels = np.argmax(teacher_probs, axis=1)
        loss = consistency_loss(p_t, teacher_probs, student_logits=sims_t, scale=cfg.sigma)
    elif cfg.method == "aws":
        w = cfg.weights
        ind_probs = p_t.data if cfg.indicator_source == "target" else p_ssl.data
        pseudo_labels = np.argmax(ind_probs, axis=1)
        cl = kd = ml = None
        if w.enable_cl:
            ind = pairwise_indicator(ind_probs, cfg.k, cfg.n)
            cl = contrastive_loss(f_t, ind, cfg.cl_mode)
        if w.enable_kd:
            kd = kd_loss(f_t, f_ssl)
        if w.enable_ml:
            ssl_term, target_term = mutual_learning_loss(
                p_ssl, p_t, cfg.mi_sign, ssl_logits=sims_ssl, scale=cfg.sigma
            )
            ml = ssl_term + target_term
        loss = total_loss(cl, kd, ml, w)

    if loss is not None and loss.requires_grad:
        value = loss.value
        if not np.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite loss ({value}) at domain {domain_index}, batch {batch_index}"
            )
        loss.backward()
        sgd_momentum_step(opt.params, opt)

    if cfg.method == "cr" and teacher is not None:
        student = pair.target_adapter.all_parameters() + [pair.target_classifier.prototypes]
        ema_update(teacher.params(), student, cfg.ema_alpha)
    if cfg.update_ssl_encoder:
        ema_update(
            pair.ssl_adapter.all_parameters(),
            pair.target_adapter.all_parameters(),
            cfg.ema_alpha,
        )

    return StepRecord(
        domain_index=domain_index,
        batch_index=batch_index,
        predictions=predictions,
        pseudo_labels=pseudo_labels,
        entropy_per_sample=entropies,
        wall_time=time.perf_counter() - t0,
    )


def run_ctta(
    pair: ModelPair,
    stream: DomainStream,
    cfg: MethodConfig,
    opt: OptimizerState,
    seed: int = 0,
) -> RunData:
    """Adapt through every domain in order, scoring predictions online.

    No state is reset between domains; the optimizer and (for the
    consistency baseline) the EMA teacher persist for the whole run.
    """
    if not stream.domains:
        raise ValueError("empty stream")
    if stream.dim != pair.target_classifier.dim:
        raise ValueError(
            f"stream dim {stream.dim} != model dim {pair.target_classifier.dim}"
        )
    cfg.validate(pair.target_classifier.n_classes)
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, _ENGINE_STREAM])
    teacher = _Teacher(pair) if cfg.method == "cr" else None
    ssl_hash_start = hash_params(pair.ssl_adapter.all_parameters())

    records = []
    start_hashes, end_hashes = [], []
    every = all_parameters(pair)
    for di, domain in enumerate(stream.domains):
        start_hashes.append(hash_params(every))
        for bi, bx in enumerate(domain.batches):
            records.append(
                adapt_step(pair, bx, cfg, opt, rng, teacher, domain_index=di, batch_index=bi)
            )
        end_hashes.append(hash_params(every))

    # --- scoring: the only engine code that touches the hidden labels ---
    per_domain = _score_records(records, stream)
    mean_error = float(np.mean([d.error for d in per_domain]))
    return RunData(
        method=cfg.method,
        seed=seed,
        config=replace(cfg, weights=replace(cfg.weights)),
        records=records,
        per_domain=per_domain,
        mean_error=mean_error,
        domain_start_hashes=start_hashes,
        domain_end_hashes=end_hashes,
        ssl_adapter_hash_start=ssl_hash_start,
        ssl_adapter_hash_end=hash_params(pair.ssl_adapter.all_parameters()),
        wall_time_total=time.perf_counter() - t0,
    )


def _score_records(records, stream: DomainStream):
    per_domain = []
    by_domain = {}
    for rec in records:
        by_domain.setdefault(rec.domain_index, []).append(rec)
    for di, domain in enumerate(stream.domains):
        wrong = 0
        total = 0
        for rec in by_domain.get(di, []):
            labels = domain.eval_labels[rec.batch_index]
            rec.true_labels = labels
            rec.pseudo_label_correct = rec.pseudo_labels == labels
            wrong += int((rec.predictions != labels).sum())
            total += len(labels)
        per_domain.append(DomainResult(domain.name, 100.0 * wrong / total, total))
    return per_domain


def evaluate_stream(pair: ModelPair, stream: DomainStream, cfg: MethodConfig, seed: int = 0) -> RunData:
    """Frozen evaluation: the none-method run over a stream."""
    frozen_cfg = replace(cfg, method="none", update_ssl_encoder=False)
    opt = OptimizerState([], learning_rate=0.0, momentum=0.0)
    return run_ctta(pair, stream, frozen_cfg, opt, seed=seed)


def evaluate_dataset(pair: ModelPair, dataset: EmbeddingDataset, cfg: MethodConfig,
                     batch_size: int = 256) -> float:
    """Accuracy (percent) of the current evaluated model on a labeled set."""
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        bx = dataset.embeddings[lo:lo + batch_size]
        x = constant(bx)
        _, _, p_t = _forward(pair.target_adapter, pair.target_classifier, x, cfg.sigma)
        if cfg.eval_model == "target":
            probs = p_t.data
        else:
            _, _, p_ssl = _forward(pair.ssl_adapter, pair.ssl_classifier, x, cfg.sigma)
            probs = p_ssl.data if cfg.eval_model == "ssl" else 0.5 * (p_t.data + p_ssl.data)
        preds = np.argmax(probs, axis=1)
        correct += int((preds == dataset.labels[lo:lo + batch_size]).sum())
    return 100.0 * correct / len(dataset)


@dataclass
class GeneralizationData:
    adapt: RunData
    heldout: RunData
    heldout_hash_before: str
    heldout_hash_after: str


def run_domain_generalization(
    pair: ModelPair,
    adapt_stream: DomainStream,
    heldout_stream: DomainStream,
    cfg: MethodConfig,
    opt: OptimizerState,
    seed: int = 0,
) -> GeneralizationData:
    """Adapt online over one stream, then evaluate frozen on held-out domains."""
    adapt_names = {d.name for d in adapt_stream.domains}
    overlap = adapt_names & {d.name for d in heldout_stream.domains}
    if overlap:
        raise ValueError(f"adapt and holdout domains overlap: {sorted(overlap)}")
    adapt_data = run_ctta(pair, adapt_stream, cfg, opt, seed=seed)
    before = hash_params(all_parameters(pair))
    heldout_data = evaluate_stream(pair, heldout_stream, cfg, seed=seed)
    after = hash_params(all_parameters(pair))
    return GeneralizationData(adapt_data, heldout_data, before, after)
