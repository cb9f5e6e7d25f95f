"""Experiment driver: suite construction, model setup, full run bundles.

This is the layer the CLI and the acceptance harness share. A "suite" is
either a named synthetic preset or a manifest of dataset files; a run
bundle carries the raw run, the report, and the diagnostic artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import backend
from .data import (
    DomainStream,
    SyntheticSuiteConfig,
    assemble_stream,
    generate_synthetic_suite,
    load_suite,
)
from .engine import (
    MethodConfig,
    OptimizerState,
    RunData,
    evaluate_dataset,
    evaluate_stream,
    resolve_learning_rate,
    run_ctta,
    run_domain_generalization,
    trainable_params,
)
from .losses import LossWeights
from .model import EmbeddingDataset, ModelPair, build_prototypes, init_target_from_ssl
from .report import (
    RunReport,
    entropy_accuracy_profile,
    shift_matrix_for_run,
    summarize,
)

_PROTO_STREAM = 0x9707

SUITE_PRESETS = {
    # reference suites: C=10, d=32, 15 domains, 2000 samples/domain, batch 64
    "synthetic-high-sep": dict(class_separation=6.0),
    "synthetic-low-sep": dict(class_separation=2.5),
    # small suite for smoke tests and examples
    "synthetic-smoke": dict(
        n_classes=5, dim=8, class_separation=3.0, samples_per_domain=192,
        n_domains=4, batch_size=32, source_samples_per_class=40,
    ),
}


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-4
    momentum: float = 0.9
    scale_lr_with_batch: bool = True


@dataclass
class PrototypeConfig:
    n_shot: int | None = None  # None: full-shot
    seed: int | None = None  # None: derived from the run seed


@dataclass
class RunConfig:
    """Complete run description; mirrors the CLI config JSON."""

    method: MethodConfig
    optimizer: OptimizerConfig
    prototypes: PrototypeConfig
    suite_overrides: dict
    baseline_mean: float | None = None


def default_run_config(method: str = "aws") -> RunConfig:
    return RunConfig(
        method=MethodConfig(method=method),
        optimizer=OptimizerConfig(),
        prototypes=PrototypeConfig(),
        suite_overrides={},
    )


def config_from_dict(raw: dict, method: str | None = None) -> RunConfig:
    """Build a RunConfig from the (possibly partial) CLI config JSON."""
    raw = dict(raw or {})
    m = dict(raw.get("method", {}))
    if method is not None:
        m["method"] = method
    weights = LossWeights(
        lambda_kd=m.pop("lambda_kd", 0.01),
        lambda_ml=m.pop("lambda_ml", 0.4),
        enable_cl=m.pop("enable_cl", True),
        enable_kd=m.pop("enable_kd", True),
        enable_ml=m.pop("enable_ml", True),
    )
    known = {f for f in MethodConfig.__dataclass_fields__ if f != "weights"}
    unknown = set(m) - known
    if unknown:
        raise ValueError(f"unknown method config fields: {sorted(unknown)}")
    method_cfg = MethodConfig(weights=weights, **m)
    opt_raw = dict(raw.get("optimizer", {}))
    unknown = set(opt_raw) - set(OptimizerConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown optimizer config fields: {sorted(unknown)}")
    proto_raw = dict(raw.get("prototypes", {}))
    unknown = set(proto_raw) - set(PrototypeConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown prototype config fields: {sorted(unknown)}")
    return RunConfig(
        method=method_cfg,
        optimizer=OptimizerConfig(**opt_raw),
        prototypes=PrototypeConfig(**proto_raw),
        suite_overrides=dict(raw.get("suite", {})),
        baseline_mean=raw.get("baseline_mean"),
    )


def build_suite(suite: str, overrides: dict, seed: int):
    """Resolve a preset name or manifest path into (source, stream, batch_size)."""
    overrides = dict(overrides or {})
    if suite in SUITE_PRESETS:
        params = dict(SUITE_PRESETS[suite])
        params.update(overrides)
        cfg = SyntheticSuiteConfig(seed=seed, **params)
        source, stream = generate_synthetic_suite(cfg)
        return source, stream, cfg.batch_size
    batch_size = int(overrides.pop("batch_size", 64))
    if overrides:
        raise ValueError(
            f"suite overrides {sorted(overrides)} only apply to synthetic presets"
        )
    source, datasets = load_suite(suite)
    stream = assemble_stream(datasets, batch_size, seed=[seed, 0x57AB])
    return source, stream, batch_size


def prepare_pair(source: EmbeddingDataset, cfg: RunConfig, seed: int) -> ModelPair:
    proto_seed = cfg.prototypes.seed
    if proto_seed is None:
        proto_seed = int(np.random.default_rng([seed, _PROTO_STREAM]).integers(2**31))
    classifier = build_prototypes(
        source,
        logit_scale=cfg.method.sigma,
        n_shot=cfg.prototypes.n_shot,
        seed=proto_seed,
    )
    return init_target_from_ssl(classifier, source.dim, cfg.method.adapter_mode)


def make_optimizer(pair: ModelPair, cfg: RunConfig, batch_size: int) -> OptimizerState:
    lr = resolve_learning_rate(
        cfg.optimizer.base_lr, batch_size, cfg.optimizer.scale_lr_with_batch
    )
    return OptimizerState(
        trainable_params(pair, cfg.method), lr, cfg.optimizer.momentum
    )


@dataclass
class RunBundle:
    run: RunData
    report: RunReport
    baseline_run: RunData  # frozen initial model over the same stream
    entropy_profile: list
    shifts: object
    source: EmbeddingDataset
    stream: DomainStream
    pair: ModelPair


def execute_run(suite: str, cfg: RunConfig, seed: int) -> RunBundle:
    """Full protocol: setup, frozen baseline pass, online run, diagnostics."""
    source, stream, batch_size = build_suite(suite, cfg.suite_overrides, seed)
    pair = prepare_pair(source, cfg, seed)
    initial_pair = pair.copy()
    source_accuracy = evaluate_dataset(pair, source, cfg.method)
    opt = make_optimizer(pair, cfg, batch_size)
    run = run_ctta(pair, stream, cfg.method, opt, seed=seed)
    baseline_run = evaluate_stream(initial_pair, stream, cfg.method, seed=seed)
    baseline_mean = cfg.baseline_mean
    if baseline_mean is None:
        baseline_mean = baseline_run.mean_error
    report = summarize(run, baseline_mean, source_accuracy)
    report.backend = backend.active()
    shifts = shift_matrix_for_run(run, baseline_run)
    profile = entropy_accuracy_profile(run.records, source.n_classes)
    return RunBundle(run, report, baseline_run, profile, shifts, source, stream, pair)


def run_mean_error(suite: str, cfg: RunConfig, seed: int) -> float:
    """Mean error of a fresh run; used by sweep/ablation cells."""
    source, stream, batch_size = build_suite(suite, cfg.suite_overrides, seed)
    pair = prepare_pair(source, cfg, seed)
    opt = make_optimizer(pair, cfg, batch_size)
    return run_ctta(pair, stream, cfg.method, opt, seed=seed).mean_error


def sweep_cell_config(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply sweep-cell overrides (k/n or lambda weights) to a copy."""
    method = replace(cfg.method, weights=replace(cfg.method.weights))
    for key, value in overrides.items():
        if hasattr(method.weights, key):
            setattr(method.weights, key, value)
        else:
            setattr(method, key, value)
    return replace(cfg, method=method)


def execute_domain_generalization(
    suite: str, cfg: RunConfig, seed: int, adapt_first: int, holdout: int
):
    """Adapt on the first domains, then frozen-evaluate the held-out tail."""
    source, stream, batch_size = build_suite(suite, cfg.suite_overrides, seed)
    if adapt_first + holdout > len(stream.domains):
        raise ValueError(
            f"need {adapt_first}+{holdout} domains, stream has {len(stream.domains)}"
        )
    adapt_stream = DomainStream(stream.domains[:adapt_first])
    heldout_stream = DomainStream(stream.domains[adapt_first:adapt_first + holdout])
    pair = prepare_pair(source, cfg, seed)
    initial_pair = pair.copy()
    opt = make_optimizer(pair, cfg, batch_size)
    gen = run_domain_generalization(pair, adapt_stream, heldout_stream, cfg.method, opt, seed=seed)
    frozen_heldout = evaluate_stream(initial_pair, heldout_stream, cfg.method, seed=seed)
    return gen, frozen_heldout
