"""Compare the numba and numpy kernel backends.

Each backend runs in its own interpreter, since the choice is fixed at import
time by ``ZEST_DISABLE_NUMBA``.  Usage::

    python benchmarks/bench_kernels.py [--states 10000] [--dim 32] [--repeats 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeats: int) -> float:
    fn()  # compile / warm caches outside the timed runs
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def worker(states: int, dim: int, repeats: int) -> dict:
    from zest import _kernels
    from zest.estimators import (
        GumbelConfig,
        build_mips_gumbel_index,
        lsh_budget_estimate,
        mips_gumbel_estimate,
        topk_gumbel_estimate,
    )
    from zest.lsh_core import LshParams, build_tables, mips_transform_query, fingerprint
    from zest.model_store import generate_synthetic

    snap = generate_synthetic(states, dim, 20, seed=0)
    model, xs = snap.model, snap.contexts.contexts
    params = LshParams(10, 16)
    tables = build_tables(model, params)
    projected = np.random.default_rng(0).standard_normal((states, params.n_bits))
    qkeys = [fingerprint(mips_transform_query(x), tables.projection, params) for x in xs]
    perturbed = np.random.default_rng(1).gumbel(size=(200, states))
    gcfg = GumbelConfig(50, seed=0)
    mips_params = LshParams(5, 16)
    index = build_mips_gumbel_index(model, gcfg.n_draws, mips_params, seed=0)

    cases = {
        "pack_keys": lambda: _kernels.pack_keys(projected, params.k_bits, params.n_tables),
        "probe_union x20": lambda: [
            _kernels.probe_union(q, tables.table_ptr, tables.bucket_keys, tables.bucket_ptr, tables.members)
            for q in qkeys
        ],
        "rank_values": lambda: _kernels.rank_values(perturbed, 2),
        "lsh_budget_estimate x20": lambda: [lsh_budget_estimate(tables, model, x, 100, 0) for x in xs],
        "topk_gumbel_estimate x20": lambda: [
            topk_gumbel_estimate(model, x, GumbelConfig(50, seed=0, rank=2)) for x in xs
        ],
        "mips_gumbel_estimate x20": lambda: [
            mips_gumbel_estimate(model, x, gcfg, mips_params, index=index) for x in xs
        ],
    }
    return {"backend": _kernels.BACKEND, "times": {k: _best(f, repeats) for k, f in cases.items()}}


def run_backend(disable: bool, args: argparse.Namespace) -> dict:
    env = dict(os.environ, ZEST_DISABLE_NUMBA="1" if disable else "0")
    cmd = [sys.executable, __file__, "--worker", "--states", str(args.states),
           "--dim", str(args.dim), "--repeats", str(args.repeats)]
    out = subprocess.run(cmd, env=env, check=True, stdout=subprocess.PIPE, text=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--states", type=int, default=10_000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.states, args.dim, args.repeats)))
        return
    fast, slow = run_backend(False, args), run_backend(True, args)
    print(f"{'case':<28}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for case, t_fast in fast["times"].items():
        t_slow = slow["times"][case]
        print(f"{case:<28}{t_fast * 1e3:>10.2f}ms{t_slow * 1e3:>10.2f}ms{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
