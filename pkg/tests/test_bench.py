import csv
import json
import math
import time

import numpy as np
import pytest

from zest.bench import (
    CSV_COLUMNS,
    BenchConfig,
    BenchReport,
    BenchRow,
    emit_report,
    load_report,
    run_accuracy_bench,
    run_timing_bench,
    run_topk_experiment,
)
from zest.model_store import generate_synthetic, save_snapshot


@pytest.fixture(scope="module")
def snap1000():
    return generate_synthetic(1000, 16, 20, scale=1.0, seed=8)


def strip_times(report):
    return [(r.estimator, r.budget, r.mae_log, r.mae_rel, r.trials) for r in report.rows]


class TestConfig:
    @pytest.mark.parametrize(
        "bad",
        [
            dict(budgets=[50, 10]),
            dict(budgets=[10, 10]),
            dict(budgets=[0, 5]),
            dict(budgets=[]),
            dict(trials=0),
            dict(methods=["lsh", "bogus"]),
            dict(format="xml"),
        ],
    )
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            BenchConfig(**bad)

    def test_needs_snapshot(self):
        with pytest.raises(ValueError):
            run_accuracy_bench(BenchConfig())

    def test_uniform_budget_above_n(self, small_snapshot):
        with pytest.raises(ValueError):
            run_accuracy_bench(BenchConfig(methods=["uniform_is"], budgets=[51]), small_snapshot)


class TestAccuracy:
    def test_exact_row_is_zero(self, small_snapshot):
        rep = run_accuracy_bench(BenchConfig(methods=["exact"], budgets=[5], trials=2), small_snapshot)
        assert rep.rows[0].mae_log == pytest.approx(0.0, abs=1e-12)
        assert rep.rows[0].mae_rel == pytest.approx(0.0, abs=1e-12)

    def test_deterministic(self, small_snapshot):
        cfg = BenchConfig(methods=["lsh", "uniform_is", "exact_gumbel"], budgets=[5, 20], trials=3, seed=4)
        a = run_accuracy_bench(cfg, small_snapshot)
        b = run_accuracy_bench(cfg, small_snapshot)
        assert strip_times(a) == strip_times(b)
        assert a.metadata["per_context_mae_log"] == b.metadata["per_context_mae_log"]

    def test_loads_snapshot_from_path(self, small_snapshot, tmp_path):
        path = tmp_path / "s.zest"
        save_snapshot(small_snapshot, path)
        cfg = BenchConfig(snapshot=path, methods=["uniform_is"], budgets=[5], trials=2)
        assert strip_times(run_accuracy_bench(cfg)) == strip_times(run_accuracy_bench(cfg, small_snapshot))

    def test_trials_reconcile_with_skips(self):
        # sparse retrieval makes some LSH trials hit an empty sample set
        snap = generate_synthetic(60, 6, 8, scale=1.0, seed=1)
        cfg = BenchConfig(methods=["lsh"], budgets=[3], trials=12, k_bits=12, n_tables=1)
        rep = run_accuracy_bench(cfg, snap)
        skipped = rep.metadata["skipped_trials"]["lsh@3"]
        assert skipped > 0
        assert rep.rows[0].trials == 12 - skipped

    def test_mae_non_increasing_and_lsh_wins(self, snap1000):
        budgets = [20, 60, 150, 400]
        cfg = BenchConfig(methods=["lsh", "uniform_is"], budgets=budgets, trials=10, seed=1)
        rep = run_accuracy_bench(cfg, snap1000)
        for method in ("lsh", "uniform_is"):
            maes = [rep.row(method, b).mae_log for b in budgets]
            assert all(b <= a for a, b in zip(maes, maes[1:])), (method, maes)
        pc = rep.metadata["per_context_mae_log"]
        for b in budgets:
            wins = np.mean(np.array(pc[f"lsh@{b}"]) <= np.array(pc[f"uniform_is@{b}"]))
            assert wins >= 0.8, (b, wins)

    def test_mae_values_non_negative(self, small_snapshot):
        rep = run_accuracy_bench(BenchConfig(methods=["uniform_is", "mips_gumbel"], budgets=[5], trials=2), small_snapshot)
        assert all(r.mae_log >= 0 and r.mae_rel >= 0 for r in rep.rows)

    def test_environment_metadata(self, small_snapshot):
        rep = run_accuracy_bench(BenchConfig(methods=["exact"], budgets=[1], trials=1), small_snapshot)
        env = rep.metadata["environment"]
        assert env["backend"] in ("numba", "numpy")
        assert "cpu_count" in env


class TestTiming:
    def test_build_time_reported_separately(self, small_snapshot):
        cfg = BenchConfig(methods=["lsh", "mips_gumbel", "uniform_is"], budgets=[5], trials=3)
        rep = run_timing_bench(cfg, small_snapshot)
        builds = rep.metadata["build_time_s"]
        assert builds["lsh@5"] > 0 and builds["mips_gumbel@5"] > 0
        assert builds["uniform_is@5"] < builds["lsh@5"]
        per = rep.metadata["per_estimate_s"]
        for r in rep.rows:
            assert r.wall_time_s > 0
            assert per[f"{r.estimator}@{r.budget}"] == pytest.approx(r.wall_time_s / 5)

    def test_doubling_trials_doubles_runtime(self):
        snap = generate_synthetic(2000, 8, 4, seed=0)

        def elapsed(trials):
            cfg = BenchConfig(methods=["exact_gumbel"], budgets=[100], trials=trials, warmup=0)
            t0 = time.perf_counter()
            run_timing_bench(cfg, snap)
            return time.perf_counter() - t0

        elapsed(1)
        ratio = elapsed(8) / elapsed(4)
        assert 2 * 0.7 <= ratio <= 2 * 1.3


class TestTopk:
    def test_rows_per_rank_and_direction(self):
        snap = generate_synthetic(300, 8, 3, seed=2)
        cfg = BenchConfig(budgets=[50], trials=4)
        rep = run_topk_experiment(cfg, snap, ranks=(1, 2, 3))
        assert [r.estimator for r in rep.rows] == ["topk_gumbel_rank1", "topk_gumbel_rank2", "topk_gumbel_rank3"]
        assert rep.rows[0].mae_log < rep.rows[1].mae_log
        assert rep.metadata["gap"] > 0
        assert len(rep.metadata["per_repetition"]["1"]) == 4

    def test_single_state_gap_is_zero(self):
        snap = generate_synthetic(1, 3, 2, seed=2)
        rep = run_topk_experiment(BenchConfig(budgets=[20], trials=3), snap)
        assert rep.metadata["gap"] == 0.0
        assert rep.rows[0].mae_log == rep.rows[1].mae_log
        assert rep.metadata["effective_ranks"] == [1, 1]

    def test_bad_ranks(self, small_snapshot):
        with pytest.raises(ValueError):
            run_topk_experiment(BenchConfig(budgets=[5]), small_snapshot, ranks=(0, 1))


class TestEmit:
    def _report(self, n):
        rows = [BenchRow("lsh", 10 * (i + 1), 0.1 * i, 0.2 * i, 0.001, 5) for i in range(n)]
        return BenchReport(rows, {"kind": "accuracy", "arr": np.arange(2), "x": np.float64(1.5)})

    def test_empty_csv_is_header_only(self, tmp_path):
        path = tmp_path / "e.csv"
        emit_report(BenchReport(), "csv", path)
        assert path.read_text().strip() == ",".join(CSV_COLUMNS)

    def test_csv_rows_and_columns(self, tmp_path):
        path = tmp_path / "r.csv"
        emit_report(self._report(3), "csv", path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS == ("estimator", "budget", "mae_log", "mae_rel", "wall_time_s", "trials")
        assert len(rows) == 4
        assert rows[2][:2] == ["lsh", "20"]

    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "r.json"
        rep = self._report(3)
        emit_report(rep, "json", path)
        back = load_report(path)
        assert back.rows == rep.rows
        assert back.metadata["arr"] == [0, 1]
        doc = json.loads(path.read_text())
        assert doc["columns"] == list(CSV_COLUMNS)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(BenchReport(), "xml", tmp_path / "x")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            emit_report(BenchReport(), "csv", tmp_path / "missing" / "r.csv")
