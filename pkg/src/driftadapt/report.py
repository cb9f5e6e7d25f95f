"""Run reports, diagnostics, sweeps, and table emission.

Percentages are stored at full precision everywhere (report.json and the
CSVs round-trip exactly); the human-readable table printed by the CLI
rounds to one decimal, mirroring the usual benchmark layout. CSV columns
are fixed: domain columns in stream order, then Mean, then Gain.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import MethodConfig, RunData


@dataclass
class RunReport:
    method: str
    seed: int
    per_domain_error: list  # [(domain name, error %)], stream order
    mean_error: float
    gain_vs_baseline: float | None
    baseline_mean: float | None
    source_accuracy: float | None
    domain_summaries: list  # per-domain diagnostics
    wall_time_total: float
    config: dict
    ssl_adapter_hash_start: str = ""
    ssl_adapter_hash_end: str = ""
    backend: str = ""

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class ShiftMatrix:
    """2x2 prediction-shift counts: (initially correct?) x (finally correct?)."""

    per_domain: list  # [(name, counts)] with counts[initial][final]
    total: np.ndarray

    def row(self, counts):
        return {
            "correct_to_correct": int(counts[1][1]),
            "correct_to_wrong": int(counts[1][0]),
            "wrong_to_correct": int(counts[0][1]),
            "wrong_to_wrong": int(counts[0][0]),
        }


def summarize(run: RunData, baseline_mean: float | None = None,
              source_accuracy: float | None = None) -> RunReport:
    """Fold raw run data into a report; gain is baseline mean minus method mean."""
    if not run.per_domain:
        raise ValueError("run has no domains")
    per_domain = [(d.name, d.error) for d in run.per_domain]
    mean_error = float(np.mean([e for _, e in per_domain]))
    gain = None if baseline_mean is None else baseline_mean - mean_error
    summaries = []
    for di, (name, err) in enumerate(per_domain):
        recs = [r for r in run.records if r.domain_index == di]
        n = sum(len(r.predictions) for r in recs)
        pseudo_ok = sum(int(r.pseudo_label_correct.sum()) for r in recs)
        summaries.append(
            {
                "domain": name,
                "error": err,
                "n_samples": n,
                "n_batches": len(recs),
                "pseudo_label_accuracy": 100.0 * pseudo_ok / n,
                "mean_entropy": float(np.mean(np.concatenate([r.entropy_per_sample for r in recs]))),
            }
        )
    cfg = asdict(run.config)
    return RunReport(
        method=run.method,
        seed=run.seed,
        per_domain_error=per_domain,
        mean_error=mean_error,
        gain_vs_baseline=gain,
        baseline_mean=baseline_mean,
        source_accuracy=source_accuracy,
        domain_summaries=summaries,
        wall_time_total=run.wall_time_total,
        config=cfg,
        ssl_adapter_hash_start=run.ssl_adapter_hash_start,
        ssl_adapter_hash_end=run.ssl_adapter_hash_end,
    )


def prediction_shift(initial_preds, final_preds, labels) -> np.ndarray:
    """Bucket samples by (initially correct?, finally correct?) into 2x2 counts."""
    initial_preds = np.asarray(initial_preds)
    final_preds = np.asarray(final_preds)
    labels = np.asarray(labels)
    if not (len(initial_preds) == len(final_preds) == len(labels)):
        raise ValueError(
            f"length mismatch: {len(initial_preds)}, {len(final_preds)}, {len(labels)}"
        )
    counts = np.zeros((2, 2), dtype=np.int64)
    init_ok = (initial_preds == labels).astype(np.int64)
    final_ok = (final_preds == labels).astype(np.int64)
    for i, f in zip(init_ok, final_ok):
        counts[i][f] += 1
    return counts


def shift_matrix_for_run(run: RunData, initial_run: RunData) -> ShiftMatrix:
    """Per-domain and total shifts of online predictions vs the frozen model."""
    per_domain = []
    total = np.zeros((2, 2), dtype=np.int64)
    n_domains = len(run.per_domain)
    for di in range(n_domains):
        final = np.concatenate([r.predictions for r in run.records if r.domain_index == di])
        initial = np.concatenate([r.predictions for r in initial_run.records if r.domain_index == di])
        labels = np.concatenate([r.true_labels for r in run.records if r.domain_index == di])
        counts = prediction_shift(initial, final, labels)
        per_domain.append((run.per_domain[di].name, counts))
        total += counts
    return ShiftMatrix(per_domain, total)


def entropy_accuracy_profile(records, n_classes: int, n_bins: int = 10):
    """Error rate per entropy bin over [0, ln C]; diagnostic only.

    Empty bins report count 0 and error_rate 0.0.
    """
    if not records:
        raise ValueError("no step records")
    height = math.log(n_classes)
    edges = np.linspace(0.0, height, n_bins + 1)
    entropies = np.concatenate([r.entropy_per_sample for r in records])
    wrong = np.concatenate(
        [(r.predictions != r.true_labels).astype(np.float64) for r in records]
    )
    idx = np.minimum((entropies / (height / n_bins)).astype(np.int64), n_bins - 1)
    rows = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        rate = float(100.0 * wrong[mask].mean()) if count else 0.0
        rows.append(
            {"bin_low": float(edges[b]), "bin_high": float(edges[b + 1]),
             "error_rate": rate, "count": count}
        )
    return rows


# ---------------------------------------------------------------------------
# sweeps and ablations


SWEEP_GRIDS = {
    "kn": [(1, 2), (1, 3), (1, 5), (3, 10), (5, 20)],
    "lkd": [0.0, 0.01, 0.02, 0.03, 0.04],
    "lml": [0.0, 0.1, 0.2, 0.3, 0.4],
}

ABLATION_ROWS = [
    ("baseline", dict(enable_cl=False, enable_kd=False, enable_ml=False)),
    ("CL", dict(enable_cl=True, enable_kd=False, enable_ml=False)),
    ("ML", dict(enable_cl=False, enable_kd=False, enable_ml=True)),
    ("KD+ML", dict(enable_cl=False, enable_kd=True, enable_ml=True)),
    ("CL+KD", dict(enable_cl=True, enable_kd=True, enable_ml=False)),
    ("CL+ML", dict(enable_cl=True, enable_kd=False, enable_ml=True)),
    ("CL+KD+ML", dict(enable_cl=True, enable_kd=True, enable_ml=True)),
]


def sweep_cells(grid: str):
    """(grid name, row label, config overrides) for each cell of a preset grid."""
    if grid == "paper-all":
        cells = []
        for g in ("kn", "lkd", "lml"):
            cells.extend(sweep_cells(g))
        return cells
    if grid == "kn":
        return [("kn", f"[{k},{n}]", {"k": k, "n": n}) for k, n in SWEEP_GRIDS["kn"]]
    if grid == "lkd":
        return [("lkd", repr(v), {"lambda_kd": v}) for v in SWEEP_GRIDS["lkd"]]
    if grid == "lml":
        return [("lml", repr(v), {"lambda_ml": v}) for v in SWEEP_GRIDS["lml"]]
    raise ValueError(f"unknown sweep grid {grid!r}")


def run_sweep(run_cell, grid: str, n_classes: int):
    """Run every cell in grid order; infeasible cells (n > C) report N/A.

    run_cell(overrides) -> mean error %. Each cell owns fresh state.
    """
    rows = []
    for grid_name, label, overrides in sweep_cells(grid):
        if "n" in overrides and overrides["n"] > n_classes:
            rows.append({"grid": grid_name, "cell": label, "mean_error": None})
            continue
        rows.append({"grid": grid_name, "cell": label, "mean_error": run_cell(overrides)})
    return rows


def run_ablation(run_row):
    """Table of mean errors for each component toggle combination.

    run_row(label, weight_overrides) -> mean error %.
    """
    return [
        {"cell": label, "mean_error": run_row(label, overrides)}
        for label, overrides in ABLATION_ROWS
    ]


# ---------------------------------------------------------------------------
# emission


def write_report_json(report: RunReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")


def write_table_csv(report: RunReport, path):
    """Single-row method table: method, each domain, Mean, Gain."""
    names = [name for name, _ in report.per_domain_error]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + names + ["Mean", "Gain"])
        gain = "" if report.gain_vs_baseline is None else repr(report.gain_vs_baseline)
        writer.writerow(
            [report.method]
            + [repr(err) for _, err in report.per_domain_error]
            + [repr(report.mean_error), gain]
        )


def read_table_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        row = next(reader)
    values = {col: (float(v) if v else None) for col, v in zip(header[1:], row[1:])}
    return row[0], values


def write_shifts_csv(shifts: ShiftMatrix, path):
    cols = ["domain", "wrong_to_wrong", "wrong_to_correct", "correct_to_wrong", "correct_to_correct"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for name, counts in shifts.per_domain + [("total", shifts.total)]:
            writer.writerow(
                [name, int(counts[0][0]), int(counts[0][1]), int(counts[1][0]), int(counts[1][1])]
            )


def write_entropy_profile_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "error_rate", "count"])
        for r in rows:
            writer.writerow([repr(r["bin_low"]), repr(r["bin_high"]), repr(r["error_rate"]), r["count"]])


def write_sweep_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid", "cell", "mean_error"])
        for r in rows:
            err = "N/A" if r["mean_error"] is None else repr(r["mean_error"])
            writer.writerow([r["grid"], r["cell"], err])


def write_ablation_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "mean_error"])
        for r in rows:
            writer.writerow([r["cell"], repr(r["mean_error"])])


def format_table(report: RunReport) -> str:
    """Human-readable one-row table, errors rounded to 0.1."""
    names = [name for name, _ in report.per_domain_error]
    widths = [max(len(n), 5) for n in names]
    header = "  ".join(n.rjust(w) for n, w in zip(names, widths)) + "   Mean   Gain"
    vals = "  ".join(f"{err:.1f}".rjust(w) for (_, err), w in zip(report.per_domain_error, widths))
    gain = "" if report.gain_vs_baseline is None else f"{report.gain_vs_baseline:+.1f}"
    return f"{report.method}\n{header}\n{vals}   {report.mean_error:4.1f}   {gain}"
