"""Accuracy, timing and top-k sensitivity benchmarks over a snapshot."""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import _kernels
from .estimators import (
    GumbelConfig,
    PartitionEstimate,
    build_mips_gumbel_index,
    derive_seed,
    exact_estimate,
    exact_gumbel_estimate,
    lsh_budget_estimate,
    mips_gumbel_estimate,
    standard_gumbel,
    topk_gumbel_estimate,
    uniform_is_estimate,
)
from .lsh_core import LshParams, build_tables, choose_k_bits
from .model_store import Snapshot, load_snapshot, log_partition

BENCH_METHODS = ("exact", "lsh", "uniform_is", "exact_gumbel", "topk_gumbel", "mips_gumbel")
CSV_COLUMNS = ("estimator", "budget", "mae_log", "mae_rel", "wall_time_s", "trials")
PTB_BUDGETS = (50, 150, 400, 1000)
TEXT8_BUDGETS = (50, 400, 1500, 5000)


@dataclass
class BenchConfig:
    snapshot: str | Path | None = None
    methods: list[str] = field(default_factory=lambda: ["lsh", "uniform_is"])
    budgets: list[int] = field(default_factory=lambda: list(PTB_BUDGETS))
    trials: int = 5
    seed: int = 0
    out: str | Path | None = None
    format: str = "csv"
    max_contexts: int | None = None
    k_bits: int | None = None  # None: tune K per budget so E|S| >= budget
    n_tables: int = 16
    mips_k_bits: int = 5
    mips_tables: int = 16
    rank: int = 2  # used by the topk_gumbel method
    warmup: int = 1

    def __post_init__(self) -> None:
        unknown = set(self.methods) - set(BENCH_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {BENCH_METHODS}")
        if not self.budgets or any(b < 1 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if list(self.budgets) != sorted(set(self.budgets)):
            raise ValueError("budgets must be strictly ascending")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.format not in ("csv", "json"):
            raise ValueError("format must be csv or json")


@dataclass
class BenchRow:
    estimator: str
    budget: int
    mae_log: float
    mae_rel: float
    wall_time_s: float
    trials: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def row(self, estimator: str, budget: int) -> BenchRow:
        for r in self.rows:
            if r.estimator == estimator and r.budget == budget:
                return r
        raise KeyError((estimator, budget))


def environment() -> dict[str, Any]:
    env = {
        "backend": _kernels.BACKEND,
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }
    if _kernels.HAVE_NUMBA:
        import numba

        env["numba"] = numba.__version__
        env["numba_threads"] = numba.config.NUMBA_NUM_THREADS
    return env


def _snapshot(cfg: BenchConfig, snapshot: Snapshot | None) -> Snapshot:
    if snapshot is not None:
        return snapshot
    if cfg.snapshot is None:
        raise ValueError("no snapshot given")
    return load_snapshot(cfg.snapshot)


def _contexts(cfg: BenchConfig, snap: Snapshot) -> np.ndarray:
    x = snap.contexts.contexts
    return x if cfg.max_contexts is None else x[: cfg.max_contexts]


class _Cell:
    """Estimator for one (method, budget) cell with its pre-processing."""

    def __init__(self, method: str, budget: int, cfg: BenchConfig, snap: Snapshot, xs: np.ndarray):
        self.method = method
        self.budget = budget
        self.cfg = cfg
        self.model = snap.model
        self.xs = xs
        self.k_bits: int | None = None
        self.build_time = 0.0
        n = self.model.state_count
        if method == "uniform_is" and budget > n:
            raise ValueError(f"budget {budget} exceeds the number of states {n}")
        if method == "topk_gumbel" and cfg.rank > n:
            raise ValueError(f"rank {cfg.rank} exceeds the number of states {n}")
        if method == "lsh":
            self.k_bits = cfg.k_bits or choose_k_bits(self.model, xs, cfg.n_tables, budget)

    def prepare(self, trial_seed: int) -> None:
        """Per-trial pre-processing (table builds); timed separately."""
        t0 = time.perf_counter()
        if self.method == "lsh":
            self.tables = build_tables(self.model, LshParams(self.k_bits, self.cfg.n_tables, trial_seed))
        elif self.method == "mips_gumbel":
            params = LshParams(self.cfg.mips_k_bits, self.cfg.mips_tables, trial_seed)
            self.index = build_mips_gumbel_index(self.model, self.budget, params, trial_seed)
        self.build_time = time.perf_counter() - t0

    def estimate(self, i: int, seed: int) -> PartitionEstimate:
        x = self.xs[i]
        m, b = self.method, self.budget
        if m == "exact":
            return exact_estimate(self.model, x)
        if m == "lsh":
            return lsh_budget_estimate(self.tables, self.model, x, b, seed)[0]
        if m == "uniform_is":
            return uniform_is_estimate(self.model, x, b, seed)
        if m == "exact_gumbel":
            return exact_gumbel_estimate(self.model, x, GumbelConfig(b, seed))
        if m == "topk_gumbel":
            return topk_gumbel_estimate(self.model, x, GumbelConfig(b, seed, rank=self.cfg.rank))
        return mips_gumbel_estimate(self.model, x, GumbelConfig(b, seed), index=self.index)


def _errors(est: PartitionEstimate, log_z: float) -> tuple[float, float] | None:
    if est.z_hat == 0 or not math.isfinite(est.log_z_hat):
        return None
    d = est.log_z_hat - log_z
    return abs(d), abs(math.expm1(d))


def _run_cell(cell: _Cell, cfg: BenchConfig, log_z: np.ndarray, trial_ids, method_id: int):
    """Run the given trials; returns per-context errors, timings, skipped count."""
    n_ctx = len(log_z)
    abs_log = np.zeros((0, n_ctx))
    rel = np.zeros((0, n_ctx))
    times, builds = [], []
    skipped = 0
    for r in trial_ids:
        cell.prepare(derive_seed(cfg.seed, method_id, cell.budget, r, 0))
        builds.append(cell.build_time)
        t0 = time.perf_counter()
        ests = [cell.estimate(i, derive_seed(cfg.seed, method_id, cell.budget, r, 1 + i)) for i in range(n_ctx)]
        times.append(time.perf_counter() - t0)
        errs = [_errors(e, lz) for e, lz in zip(ests, log_z)]
        if any(e is None for e in errs):
            skipped += 1  # a degenerate estimate (empty sample set) voids the trial
            continue
        abs_log = np.vstack([abs_log, [e[0] for e in errs]])
        rel = np.vstack([rel, [e[1] for e in errs]])
    return abs_log, rel, times, builds, skipped


def run_accuracy_bench(cfg: BenchConfig, snapshot: Snapshot | None = None) -> BenchReport:
    """MAE of ln Z-hat (and |Z-hat/Z - 1|) per (method, budget) cell."""
    snap = _snapshot(cfg, snapshot)
    xs = _contexts(cfg, snap)
    log_z = np.array([log_partition(snap.model, x) for x in xs])
    report = BenchReport(metadata={"kind": "accuracy", "environment": environment()})
    per_context, skipped, k_bits = {}, {}, {}
    for method in cfg.methods:
        method_id = BENCH_METHODS.index(method)
        for budget in cfg.budgets:
            cell = _Cell(method, budget, cfg, snap, xs)
            abs_log, rel, times, _, n_skip = _run_cell(cell, cfg, log_z, range(cfg.trials), method_id)
            done = abs_log.shape[0]
            key = f"{method}@{budget}"
            per_context[key] = abs_log.mean(axis=0).tolist() if done else []
            skipped[key] = n_skip
            if cell.k_bits is not None:
                k_bits[key] = cell.k_bits
            report.rows.append(
                BenchRow(
                    estimator=method,
                    budget=budget,
                    mae_log=float(abs_log.mean()) if done else math.nan,
                    mae_rel=float(rel.mean()) if done else math.nan,
                    wall_time_s=float(np.mean(times)),
                    trials=cfg.trials - n_skip,
                )
            )
    report.metadata.update(
        n_states=snap.model.state_count,
        n_contexts=len(xs),
        seed=cfg.seed,
        per_context_mae_log=per_context,
        skipped_trials=skipped,
        lsh_k_bits=k_bits,
        n_tables=cfg.n_tables,
    )
    return report


def run_timing_bench(cfg: BenchConfig, snapshot: Snapshot | None = None) -> BenchReport:
    """Median wall-clock for estimating every context once, per cell.

    Table/index construction is excluded from ``wall_time_s`` and reported
    under ``metadata['build_time_s']``.  The first ``cfg.warmup`` trials are
    discarded.
    """
    snap = _snapshot(cfg, snapshot)
    xs = _contexts(cfg, snap)
    log_z = np.array([log_partition(snap.model, x) for x in xs])
    report = BenchReport(metadata={"kind": "timing", "environment": environment()})
    build_times, per_estimate = {}, {}
    for method in cfg.methods:
        method_id = BENCH_METHODS.index(method)
        for budget in cfg.budgets:
            cell = _Cell(method, budget, cfg, snap, xs)
            # warm-up trials get seed ids past the measured ones
            _run_cell(cell, cfg, log_z, range(cfg.trials, cfg.trials + cfg.warmup), method_id)
            abs_log, rel, times, builds, n_skip = _run_cell(
                cell, cfg, log_z, range(cfg.trials), method_id
            )
            done = abs_log.shape[0]
            med = statistics.median(times)
            key = f"{method}@{budget}"
            build_times[key] = statistics.median(builds)
            per_estimate[key] = med / len(xs)
            report.rows.append(
                BenchRow(
                    estimator=method,
                    budget=budget,
                    mae_log=float(abs_log.mean()) if done else math.nan,
                    mae_rel=float(rel.mean()) if done else math.nan,
                    wall_time_s=med,
                    trials=cfg.trials - n_skip,
                )
            )
    report.metadata.update(
        n_states=snap.model.state_count,
        n_contexts=len(xs),
        build_time_s=build_times,
        per_estimate_s=per_estimate,
    )
    return report


def run_topk_experiment(
    cfg: BenchConfig,
    snapshot: Snapshot | None = None,
    ranks: tuple[int, ...] = (1, 2),
    n_draws: int | None = None,
) -> BenchReport:
    """Gumbel estimate using the rank-th largest perturbed value, paired noise.

    Each repetition draws one (T, N) noise block per context and feeds the
    same block to every rank.  One row per rank; per-repetition MAEs are in
    ``metadata['per_repetition']``.
    """
    snap = _snapshot(cfg, snapshot)
    xs = _contexts(cfg, snap)
    model = snap.model
    n = model.state_count
    if not ranks or min(ranks) < 1:
        raise ValueError("ranks must be positive")
    # with fewer states than a requested rank, the smallest value stands in
    effective = {k: min(k, n) for k in ranks}
    t_draws = n_draws or cfg.budgets[0]
    log_z = np.array([log_partition(model, x) for x in xs])
    per_rep = {k: [] for k in ranks}
    rel = {k: [] for k in ranks}
    elapsed = {k: 0.0 for k in ranks}
    for r in range(cfg.trials):
        errs = {k: [] for k in ranks}
        for i, x in enumerate(xs):
            noise = standard_gumbel(
                np.random.default_rng(derive_seed(cfg.seed, r, i)), (t_draws, n)
            )
            for k in ranks:
                est = topk_gumbel_estimate(
                    model, x, GumbelConfig(t_draws, rank=effective[k]), noise=noise
                )
                elapsed[k] += est.wall_time
                d = est.log_z_hat - log_z[i]
                errs[k].append(abs(d))
                rel[k].append(abs(math.expm1(d)))
        for k in ranks:
            per_rep[k].append(float(np.mean(errs[k])))
    report = BenchReport(metadata={"kind": "topk", "environment": environment()})
    for k in ranks:
        report.rows.append(
            BenchRow(
                estimator=f"topk_gumbel_rank{k}",
                budget=t_draws,
                mae_log=float(np.mean(per_rep[k])),
                mae_rel=float(np.mean(rel[k])),
                wall_time_s=elapsed[k] / cfg.trials,
                trials=cfg.trials,
            )
        )
    report.metadata.update(
        ranks=list(ranks),
        effective_ranks=[effective[k] for k in ranks],
        n_states=n,
        n_draws=t_draws,
        per_repetition={str(k): v for k, v in per_rep.items()},
        gap=float(np.mean(per_rep[max(ranks)]) - np.mean(per_rep[min(ranks)])),
    )
    return report


def emit_report(report: BenchReport, format: str, path: str | Path) -> None:
    """Write ``report`` as CSV (rows only) or JSON (rows plus metadata)."""
    if format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in report.rows:
                w.writerow([getattr(r, c) for c in CSV_COLUMNS])
    elif format == "json":
        doc = {
            "columns": list(CSV_COLUMNS),
            "rows": [asdict(r) for r in report.rows],
            "metadata": report.metadata,
        }
        Path(path).write_text(json.dumps(doc, indent=2, default=_jsonable))
    else:
        raise ValueError(f"unknown report format {format!r}")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def load_report(path: str | Path) -> BenchReport:
    """Read back a JSON report."""
    doc = json.loads(Path(path).read_text())
    return BenchReport([BenchRow(**r) for r in doc["rows"]], doc.get("metadata", {}))


