"""Command-line experiment driver.

Subcommands: ``run`` (single online run), ``sweep`` (hyperparameter
grids), ``ablate`` (component toggles), ``dgen`` (adapt-then-freeze
domain generalization), ``gen`` (write a synthetic suite to dataset
files). See README for the config JSON schema.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import backend
from .data import (
    DatasetFormatError,
    SyntheticSuiteConfig,
    generate_synthetic_datasets,
    save_suite,
)
from .report import (
    format_table,
    run_ablation,
    run_sweep,
    summarize,
    write_ablation_csv,
    write_entropy_profile_csv,
    write_report_json,
    write_shifts_csv,
    write_sweep_csv,
    write_table_csv,
)
from .runner import (
    SUITE_PRESETS,
    build_suite,
    config_from_dict,
    execute_domain_generalization,
    execute_run,
    run_mean_error,
    sweep_cell_config,
)


def _load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _add_common(p):
    p.add_argument("--suite", required=True,
                   help=f"suite manifest path or preset: {', '.join(sorted(SUITE_PRESETS))}")
    p.add_argument("--config", default=None, help="config JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--backend", default=None, choices=["compiled", "python"],
                   help="force a kernel backend")


def build_parser():
    parser = argparse.ArgumentParser(prog="driftadapt",
                                     description="online adaptation over embedding streams")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="one online adaptation run")
    p_run.add_argument("--method", required=True, choices=["none", "em", "cr", "aws"])
    p_run.add_argument("--baseline-mean", type=float, default=None,
                       help="baseline mean error for the Gain column; defaults to a frozen-model pass")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="hyperparameter grid")
    p_sweep.add_argument("--grid", required=True, choices=["kn", "lkd", "lml", "paper-all"])
    _add_common(p_sweep)

    p_abl = sub.add_parser("ablate", help="component toggle table")
    _add_common(p_abl)

    p_dgen = sub.add_parser("dgen", help="adapt on a prefix, evaluate frozen on held-out domains")
    p_dgen.add_argument("--adapt-first", type=int, default=10)
    p_dgen.add_argument("--holdout", type=int, default=5)
    _add_common(p_dgen)

    p_gen = sub.add_parser("gen", help="write a synthetic suite to dataset files")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--config", default=None,
                       help="config JSON; the 'suite' section overrides generator fields")
    p_gen.add_argument("--preset", default="synthetic-low-sep", choices=sorted(SUITE_PRESETS))
    return parser


def cmd_run(args) -> int:
    cfg = config_from_dict(_load_config(args.config), method=args.method)
    if args.baseline_mean is not None:
        cfg.baseline_mean = args.baseline_mean
    bundle = execute_run(args.suite, cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_report_json(bundle.report, os.path.join(args.out, "report.json"))
    write_table_csv(bundle.report, os.path.join(args.out, "table.csv"))
    write_shifts_csv(bundle.shifts, os.path.join(args.out, "shifts.csv"))
    write_entropy_profile_csv(bundle.entropy_profile, os.path.join(args.out, "entropy_profile.csv"))
    print(format_table(bundle.report))
    return 0


def cmd_sweep(args) -> int:
    cfg = config_from_dict(_load_config(args.config), method="aws")
    source, _, _ = build_suite(args.suite, cfg.suite_overrides, args.seed)

    def run_cell(overrides):
        return run_mean_error(args.suite, sweep_cell_config(cfg, overrides), args.seed)

    rows = run_sweep(run_cell, args.grid, source.n_classes)
    os.makedirs(args.out, exist_ok=True)
    write_sweep_csv(rows, os.path.join(args.out, "sweep.csv"))
    for r in rows:
        err = "N/A" if r["mean_error"] is None else f"{r['mean_error']:.1f}"
        print(f"{r['grid']:>4}  {r['cell']:>8}  {err}")
    return 0


def cmd_ablate(args) -> int:
    cfg = config_from_dict(_load_config(args.config), method="aws")

    def run_row(label, weight_overrides):
        return run_mean_error(args.suite, sweep_cell_config(cfg, weight_overrides), args.seed)

    rows = run_ablation(run_row)
    os.makedirs(args.out, exist_ok=True)
    write_ablation_csv(rows, os.path.join(args.out, "ablation.csv"))
    for r in rows:
        print(f"{r['cell']:>9}  {r['mean_error']:.1f}")
    return 0


def cmd_dgen(args) -> int:
    cfg = config_from_dict(_load_config(args.config), method="aws")
    gen, frozen_heldout = execute_domain_generalization(
        args.suite, cfg, args.seed, args.adapt_first, args.holdout
    )
    adapt_report = summarize(gen.adapt, baseline_mean=None)
    adapt_report.backend = backend.active()
    payload = {
        "adapt": adapt_report.to_dict(),
        "heldout": {
            "per_domain_error": [
                (d.name, d.error) for d in gen.heldout.per_domain
            ],
            "unseen_mean": gen.heldout.mean_error,
            "no_adapt_unseen_mean": frozen_heldout.mean_error,
            "params_hash_before": gen.heldout_hash_before,
            "params_hash_after": gen.heldout_hash_after,
        },
    }
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    frozen = "intact" if gen.heldout_hash_before == gen.heldout_hash_after else "VIOLATED"
    print(f"unseen mean {gen.heldout.mean_error:.1f} "
          f"(no-adapt {frozen_heldout.mean_error:.1f}); frozen holdout: {frozen}")
    return 0


def cmd_gen(args) -> int:
    raw = _load_config(args.config)
    params = dict(SUITE_PRESETS[args.preset])
    params.update(raw.get("suite", {}))
    suite_cfg = SyntheticSuiteConfig(seed=args.seed, **params)
    source, datasets = generate_synthetic_datasets(suite_cfg)
    manifest = save_suite(source, datasets, args.out)
    print(f"wrote {manifest}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "backend", None):
        backend.use(args.backend)
    try:
        handler = {
            "run": cmd_run,
            "sweep": cmd_sweep,
            "ablate": cmd_ablate,
            "dgen": cmd_dgen,
            "gen": cmd_gen,
        }[args.command]
        return handler(args)
    except (ValueError, DatasetFormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
