"""Command-line entry point: ``zest <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bench, estimators
from .estimators import GumbelConfig
from .lsh_core import LshParams, build_tables, choose_k_bits
from .model_store import (
    LogLinearModel,
    Snapshot,
    generate_synthetic,
    load_snapshot,
    log_partition,
    save_snapshot,
)
from .trainer import (
    METHODS,
    DivergenceError,
    TrainConfig,
    corpus_dataset,
    teacher_dataset,
    train,
)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_synth(args: argparse.Namespace) -> int:
    snap = generate_synthetic(args.states, args.dim, args.contexts, scale=args.scale, seed=args.seed)
    save_snapshot(snap, args.out)
    print(f"wrote {args.out}: {args.states} states, dim {args.dim}, {args.contexts} contexts")
    return 0


def _estimate_one(args: argparse.Namespace, snap: Snapshot, x: np.ndarray, i: int, tables=None):
    model = snap.model
    seed = estimators.derive_seed(args.seed, i)
    m = args.method
    if m == "exact":
        return estimators.exact_estimate(model, x)
    if m == "lsh":
        return estimators.lsh_budget_estimate(tables, model, x, args.samples, seed)[0]
    if m == "uniform_is":
        return estimators.uniform_is_estimate(model, x, args.samples, seed)
    if m == "exact_gumbel":
        return estimators.exact_gumbel_estimate(model, x, GumbelConfig(args.samples, seed))
    if m == "topk_gumbel":
        return estimators.topk_gumbel_estimate(
            model, x, GumbelConfig(args.samples, seed, rank=args.rank)
        )
    params = LshParams(args.mips_k_bits, args.tables, args.lsh_seed)
    return estimators.mips_gumbel_estimate(model, x, GumbelConfig(args.samples, seed), params, seed=seed)


def cmd_estimate(args: argparse.Namespace) -> int:
    snap = load_snapshot(args.snapshot)
    xs = snap.contexts.contexts
    ids = range(len(xs)) if args.context_index is None else [args.context_index]
    tables = None
    if args.method == "lsh":
        k = args.k_bits or choose_k_bits(snap.model, xs, args.tables, args.samples)
        tables = build_tables(snap.model, LshParams(k, args.tables, args.lsh_seed))
    print("context\tz_hat\tz_exact\tabs_log_err\tn_samples\twall_time_s")
    for i in ids:
        if not 0 <= i < len(xs):
            raise IndexError(f"context index {i} out of range [0, {len(xs)})")
        est = _estimate_one(args, snap, xs[i], i, tables)
        lz = log_partition(snap.model, xs[i])
        err = abs(est.log_z_hat - lz) if math.isfinite(est.log_z_hat) else math.inf
        print(
            f"{i}\t{est.z_hat:.6g}\t{math.exp(lz) if lz < 709 else math.inf:.6g}"
            f"\t{err:.6g}\t{est.n_samples}\t{est.wall_time:.3g}"
        )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    if args.corpus:
        text = Path(args.corpus).read_text()
        train_set, test_set, vocab = corpus_dataset(text, context_window=args.context_window)
        model = LogLinearModel(np.zeros((len(vocab), len(vocab))))
    else:
        snap = load_snapshot(args.snapshot)
        train_set, test_set = teacher_dataset(snap.model, snap.contexts.contexts, seed=args.seed)
        model = LogLinearModel(np.zeros_like(snap.model.weights))
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        estimator=args.method,
        sample_budget=args.budget,
        table_rebuild_period=args.rebuild_period,
        seed=args.seed,
    )
    try:
        _, report = train(model, train_set, test_set, cfg)
    except DivergenceError as exc:
        _write_json(args.report, exc.report.to_dict())
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    _write_json(args.report, report.to_dict())
    for e, loss in enumerate(report.epoch_loss):
        print(f"epoch {e}: loss {loss:.4f} ({report.epoch_time[e]:.2f}s)")
    print(f"test perplexity {report.test_perplexity:.4f}")
    return 0


def _write_json(path: str | None, doc: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(doc, indent=2))


def _bench_config(args: argparse.Namespace, methods_default: list[str]) -> bench.BenchConfig:
    return bench.BenchConfig(
        snapshot=args.snapshot,
        methods=args.methods or methods_default,
        budgets=args.budgets,
        trials=args.trials,
        seed=args.seed,
        out=args.out,
        format=args.format,
        max_contexts=args.max_contexts,
        k_bits=args.k_bits,
        n_tables=args.tables,
    )


def _emit(report: bench.BenchReport, cfg: bench.BenchConfig) -> None:
    if cfg.out:
        bench.emit_report(report, cfg.format, cfg.out)
    print(",".join(bench.CSV_COLUMNS))
    for r in report.rows:
        print(",".join(str(getattr(r, c)) for c in bench.CSV_COLUMNS))


def cmd_bench_accuracy(args: argparse.Namespace) -> int:
    cfg = _bench_config(args, ["exact", "lsh", "uniform_is"])
    _emit(bench.run_accuracy_bench(cfg), cfg)
    return 0


def cmd_bench_timing(args: argparse.Namespace) -> int:
    cfg = _bench_config(args, ["lsh", "uniform_is", "exact_gumbel", "mips_gumbel"])
    _emit(bench.run_timing_bench(cfg), cfg)
    return 0


def cmd_topk_gap(args: argparse.Namespace) -> int:
    cfg = _bench_config(args, ["topk_gumbel"])
    report = bench.run_topk_experiment(cfg, ranks=tuple(args.ranks))
    _emit(report, cfg)
    print(f"gap {report.metadata['gap']:.6g}")
    return 0


def _add_bench_args(p: argparse.ArgumentParser, budgets: list[int]) -> None:
    p.add_argument("--snapshot", required=True)
    p.add_argument("--methods", type=_str_list, default=None, help="comma-separated")
    p.add_argument("--budgets", type=_int_list, default=budgets, help="comma-separated, ascending")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--max-contexts", type=int, default=None)
    p.add_argument("--k-bits", type=int, default=None, help="LSH bits per table (default: tuned)")
    p.add_argument("--tables", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zest", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic snapshot")
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--contexts", type=int, default=100)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", help="estimate Z for snapshot contexts")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--method", choices=bench.BENCH_METHODS, default="lsh")
    p.add_argument("--k-bits", type=int, default=None)
    p.add_argument("--tables", type=int, default=16)
    p.add_argument("--mips-k-bits", type=int, default=5)
    p.add_argument("--lsh-seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--context-index", type=int, default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train", help="train a softmax model with a chosen estimator")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--snapshot", help="teacher snapshot; labels sampled from it")
    src.add_argument("--corpus", help="whitespace-tokenized text file")
    p.add_argument("--method", choices=METHODS, default="exact")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--rebuild-period", type=int, default=50)
    p.add_argument("--context-window", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench-accuracy", help="MAE per estimator and budget")
    _add_bench_args(p, list(bench.PTB_BUDGETS))
    p.set_defaults(func=cmd_bench_accuracy)

    p = sub.add_parser("bench-timing", help="median wall-clock per estimator and budget")
    _add_bench_args(p, list(bench.PTB_BUDGETS))
    p.set_defaults(func=cmd_bench_timing)

    p = sub.add_parser("topk-gap", help="rank-1 vs rank-2 Gumbel substitution")
    _add_bench_args(p, [200])
    p.add_argument("--ranks", type=_int_list, default=[1, 2])
    p.set_defaults(func=cmd_topk_gap)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
