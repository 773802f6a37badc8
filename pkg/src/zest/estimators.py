"""Partition-function estimators.

Fast methods: ``lsh_estimate`` (optionally followed by ``subsample_fixed_size``)
and ``uniform_is_estimate``.  Gumbel baselines: ``exact_gumbel_estimate``,
``topk_gumbel_estimate`` and ``mips_gumbel_estimate``.  The Bernoulli oracle,
the analytic variance and the covariance-term estimator exist to check the
fast path and are O(N) or worse by design.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .lsh_core import (
    HashTableSet,
    LshParams,
    ProjectionMatrix,
    fingerprint,
    index_from_keys,
    mips_transform_data,
    probe,
    query_candidates,
    state_retrieval_probabilities,
)
from .model_store import LogLinearModel, log_partition, logits as model_logits

ESTIMATORS = (
    "exact",
    "lsh",
    "uniform_is",
    "exact_gumbel",
    "topk_gumbel",
    "mips_gumbel",
    "bernoulli_oracle",
)

_GUMBEL_CHUNK = 1 << 21  # noise entries generated per block


class EstimatorError(ValueError):
    pass


class NonFiniteScoreError(EstimatorError):
    pass


class StaleTablesError(EstimatorError):
    pass


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Retrieved states with their exact inclusion probabilities."""

    ids: np.ndarray
    probs: np.ndarray
    logits: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def estimate(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sum(_scores(self.logits) / self.probs))


@dataclass(frozen=True)
class PartitionEstimate:
    z_hat: float
    n_samples: int
    wall_time: float
    estimator: str
    log_z_hat: float = field(default=math.nan)
    n_score_evals: int = 0
    n_probes: int = 0
    skipped: int = 0

    def __post_init__(self) -> None:
        if math.isnan(self.log_z_hat):
            lz = math.log(self.z_hat) if self.z_hat > 0 else -math.inf
            object.__setattr__(self, "log_z_hat", lz)

    @property
    def empty(self) -> bool:
        return self.n_samples == 0


@dataclass(frozen=True)
class GumbelConfig:
    n_draws: int
    seed: int = 0
    rank: int = 1

    def __post_init__(self) -> None:
        if self.n_draws < 1:
            raise ValueError(f"n_draws must be >= 1, got {self.n_draws}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


def derive_seed(base: int, *path: int) -> int:
    """Independent per-task seed from a base seed and a task index path."""
    return int(np.random.SeedSequence([base, *path]).generate_state(1, np.uint64)[0])


def _scores(logits: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        f = np.exp(logits)
    if not np.all(np.isfinite(f)):
        raise NonFiniteScoreError("exp(logit) overflowed; rescale the model or contexts")
    return f


def _as_context(model: LogLinearModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"context has shape {x.shape}, expected ({model.dim},)")
    return x


# ---------------------------------------------------------------------------
# LSH sampler
# ---------------------------------------------------------------------------


def _lsh_query(
    tables: HashTableSet, model: LogLinearModel, x: np.ndarray, allow_stale: bool
) -> tuple[np.ndarray, np.ndarray, int]:
    """(context, candidate ids, buckets probed) after the staleness checks."""
    x = _as_context(model, x)
    src = tables.source
    if src is None:
        raise StaleTablesError("tables were not built from a model")
    if src.weights.shape != model.weights.shape:
        raise StaleTablesError("tables were built for a model of a different shape")
    if src is not model and not allow_stale and src.digest != model.digest:
        raise StaleTablesError("tables were built from different weights; rebuild them")
    cand = query_candidates(tables, x)
    return x, cand.ids, cand.n_probes


def _sample_set(
    tables: HashTableSet, model: LogLinearModel, x: np.ndarray, ids: np.ndarray, scale: float = 1.0
) -> SampleSet:
    lg = model.weights[ids] @ x
    # inclusion probability is a property of the hashed (build-time) weights
    probs = state_retrieval_probabilities(tables, x, ids)
    if np.any(probs <= 0):
        raise EstimatorError("retrieved a state whose retrieval probability underflowed to 0")
    return SampleSet(ids, probs * scale, lg)


def lsh_samples(
    tables: HashTableSet, model: LogLinearModel, x: np.ndarray, allow_stale: bool = False
) -> tuple[SampleSet, int]:
    """One query; returns the sample set and the number of buckets probed."""
    x, ids, n_probes = _lsh_query(tables, model, x, allow_stale)
    return _sample_set(tables, model, x, ids), n_probes


def lsh_estimate(
    tables: HashTableSet, model: LogLinearModel, x: np.ndarray, allow_stale: bool = False
) -> tuple[PartitionEstimate, SampleSet]:
    """Sum of f(y)/p(y) over the states one LSH query retrieves.

    An empty candidate set gives z_hat = 0 with n_samples = 0.
    """
    t0 = time.perf_counter()
    s, n_probes = lsh_samples(tables, model, x, allow_stale=allow_stale)
    z = s.estimate()
    est = PartitionEstimate(
        z_hat=z,
        n_samples=len(s),
        wall_time=time.perf_counter() - t0,
        estimator="lsh",
        n_score_evals=len(s),
        n_probes=n_probes,
    )
    return est, s


def _keep_uniform(n: int, m: int, seed: int) -> np.ndarray:
    """Sorted positions of m of n items, uniformly without replacement."""
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=m, replace=False))


def subsample_fixed_size(s: SampleSet, m: int, seed: int) -> SampleSet:
    """Keep m of the |S| samples uniformly; scale survivors' p by m/|S|."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    n = len(s)
    if n <= m:
        return s
    keep = _keep_uniform(n, m, seed)
    return SampleSet(s.ids[keep], s.probs[keep] * (m / n), s.logits[keep])


def lsh_budget_estimate(
    tables: HashTableSet,
    model: LogLinearModel,
    x: np.ndarray,
    budget: int,
    seed: int,
    allow_stale: bool = False,
) -> tuple[PartitionEstimate, SampleSet]:
    """LSH estimate with the sample set cut down to at most ``budget`` states.

    The cut happens on ids, so only the kept states are ever scored.  The
    result equals ``subsample_fixed_size(lsh_samples(...), budget, seed)``.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    t0 = time.perf_counter()
    x, ids, n_probes = _lsh_query(tables, model, x, allow_stale)
    n = ids.shape[0]
    if n > budget:
        s = _sample_set(tables, model, x, ids[_keep_uniform(n, budget, seed)], budget / n)
    else:
        s = _sample_set(tables, model, x, ids)
    est = PartitionEstimate(
        z_hat=s.estimate(),
        n_samples=len(s),
        wall_time=time.perf_counter() - t0,
        estimator="lsh",
        n_score_evals=len(s),
        n_probes=n_probes,
    )
    return est, s


# ---------------------------------------------------------------------------
# uniform importance sampling
# ---------------------------------------------------------------------------


def uniform_samples(
    model: LogLinearModel, x: np.ndarray, t: int, seed: int, replace: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Draw t state ids uniformly; return (ids, logits)."""
    if t < 1:
        raise ValueError(f"sample count must be >= 1, got {t}")
    n = model.state_count
    rng = np.random.default_rng(seed)
    if replace:
        ids = rng.integers(0, n, size=t)
    else:
        if t > n:
            raise ValueError(f"cannot draw {t} distinct states from {n}")
        ids = rng.permutation(n)[:t] if t == n else rng.choice(n, size=t, replace=False)
    return ids, model.weights[ids] @ x


def uniform_is_estimate(
    model: LogLinearModel, x: np.ndarray, t: int, seed: int, replace: bool = True
) -> PartitionEstimate:
    """(N/t) * sum of f over t uniform draws.

    ``replace=False`` draws distinct states; with t = N that enumerates
    every state once and returns the exact sum.
    """
    t0 = time.perf_counter()
    x = _as_context(model, x)
    ids, lg = uniform_samples(model, x, t, seed, replace=replace)
    z = model.state_count / t * float(np.sum(_scores(lg)))
    return PartitionEstimate(
        z_hat=z,
        n_samples=t,
        wall_time=time.perf_counter() - t0,
        estimator="uniform_is",
        n_score_evals=t,
    )


# ---------------------------------------------------------------------------
# Gumbel-max baselines
# ---------------------------------------------------------------------------


def standard_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """G = -log(-log U), U ~ Uniform(0, 1)."""
    u = rng.random(shape)
    np.maximum(u, np.finfo(np.float64).tiny, out=u)
    return -np.log(-np.log(u))


class GumbelPool:
    """A fixed bank of noise vectors that estimates draw from without
    replacement, mirroring a pre-generated pool of Gumbel samples."""

    def __init__(self, n_states: int, size: int = 1000, seed: int = 0) -> None:
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.noise = standard_gumbel(np.random.default_rng(seed), (size, n_states))
        self.noise.setflags(write=False)

    @property
    def size(self) -> int:
        return self.noise.shape[0]

    def draw(self, n_draws: int, seed: int) -> np.ndarray:
        if n_draws > self.size:
            raise ValueError(f"cannot take {n_draws} draws from a pool of {self.size}")
        rows = np.random.default_rng(seed).choice(self.size, size=n_draws, replace=False)
        return self.noise[np.sort(rows)]


def gumbel_max_values(
    model: LogLinearModel,
    x: np.ndarray,
    cfg: GumbelConfig,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """H_i = rank-th largest of (logit_y + G_i(y)) for each of T draws.

    ``noise`` (T, N) overrides the seeded fresh noise.
    """
    x = _as_context(model, x)
    n = model.state_count
    if cfg.rank > n:
        raise ValueError(f"rank {cfg.rank} exceeds the number of states {n}")
    phi = model.weights @ x
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (cfg.n_draws, n):
            raise ValueError(f"noise has shape {noise.shape}, expected ({cfg.n_draws}, {n})")
        return _kernels.rank_values(np.ascontiguousarray(phi + noise), cfg.rank)
    rng = np.random.default_rng(cfg.seed)
    rows = max(1, _GUMBEL_CHUNK // n)
    out = np.empty(cfg.n_draws)
    for start in range(0, cfg.n_draws, rows):
        stop = min(cfg.n_draws, start + rows)
        block = standard_gumbel(rng, (stop - start, n))
        block += phi
        out[start:stop] = _kernels.rank_values(block, cfg.rank)
    return out


def _inverse_estimate(h: np.ndarray) -> float:
    """log Z-hat where Z-hat^-1 = mean(exp(-H)), computed in log space."""
    neg = -h
    m = neg.max()
    log_mean = float(m) + math.log(float(np.mean(np.exp(neg - m))))
    return -log_mean


def _gumbel_estimate(model, x, cfg, tag, noise) -> PartitionEstimate:
    t0 = time.perf_counter()
    h = gumbel_max_values(model, x, cfg, noise=noise)
    log_z = _inverse_estimate(h)
    return PartitionEstimate(
        z_hat=math.exp(log_z) if log_z < 709 else math.inf,
        n_samples=cfg.n_draws,
        wall_time=time.perf_counter() - t0,
        estimator=tag,
        log_z_hat=log_z,
        n_score_evals=model.state_count * cfg.n_draws,
    )


def exact_gumbel_estimate(
    model: LogLinearModel,
    x: np.ndarray,
    cfg: GumbelConfig,
    noise: np.ndarray | None = None,
    pool: GumbelPool | None = None,
) -> PartitionEstimate:
    """Z-hat = 1 / mean_i exp(-max_y(logit_y + G_i(y))) over T draws."""
    if cfg.rank != 1:
        raise ValueError("exact_gumbel_estimate needs rank 1; use topk_gumbel_estimate")
    if pool is not None:
        noise = pool.draw(cfg.n_draws, cfg.seed)
    return _gumbel_estimate(model, x, cfg, "exact_gumbel", noise)


def topk_gumbel_estimate(
    model: LogLinearModel,
    x: np.ndarray,
    cfg: GumbelConfig,
    noise: np.ndarray | None = None,
) -> PartitionEstimate:
    """As exact_gumbel_estimate but substitutes the rank-th largest value."""
    return _gumbel_estimate(model, x, cfg, "topk_gumbel", noise)


@dataclass(frozen=True, eq=False)
class MipsGumbelIndex:
    """MIPS tables over v_y = (theta_y, G_y1..G_yk)."""

    tables: HashTableSet
    noise: np.ndarray  # (N, k)
    dim: int
    noise_cols: np.ndarray | None = None  # (k, N) contiguous copy for the kernel

    def __post_init__(self) -> None:
        if self.noise_cols is None:
            cols = np.ascontiguousarray(self.noise.T)
            cols.setflags(write=False)
            object.__setattr__(self, "noise_cols", cols)

    @property
    def n_cols(self) -> int:
        return self.noise.shape[1]


def build_mips_gumbel_index(
    model: LogLinearModel, n_gumbel_cols: int, params: LshParams, seed: int
) -> MipsGumbelIndex:
    if n_gumbel_cols < 1:
        raise ValueError("n_gumbel_cols must be >= 1")
    noise = standard_gumbel(np.random.default_rng(seed), (model.state_count, n_gumbel_cols))
    noise.setflags(write=False)
    aug = np.concatenate([model.weights, noise], axis=1)
    max_norm = float(np.linalg.norm(aug, axis=1).max())
    proj = ProjectionMatrix.draw(aug.shape[1] + 1, params)
    keys = fingerprint(mips_transform_data(aug, max_norm), proj, params)
    tables = index_from_keys(keys, params, proj, max_norm)
    return MipsGumbelIndex(tables, noise, model.dim)


def mips_gumbel_estimate(
    model: LogLinearModel,
    x: np.ndarray,
    cfg: GumbelConfig,
    mips_params: LshParams | None = None,
    n_gumbel_cols: int | None = None,
    seed: int = 0,
    index: MipsGumbelIndex | None = None,
) -> PartitionEstimate:
    """Gumbel-max with the max taken only over the states a MIPS query returns.

    Draw j queries with (x, e_c), c = j mod k, and maximises
    logit_y + G_{y,c} over the retrieved subset.  Draws that retrieve
    nothing are skipped and counted; if all are empty this raises.
    """
    if cfg.rank != 1:
        raise ValueError("mips_gumbel_estimate uses the max (rank 1)")
    if index is None:
        if mips_params is None:
            mips_params = LshParams(5, 16, seed)
        index = build_mips_gumbel_index(model, n_gumbel_cols or cfg.n_draws, mips_params, seed)
    t0 = time.perf_counter()
    x = _as_context(model, x)
    if np.linalg.norm(x) == 0:
        raise ValueError("context vector has zero norm")
    tables = index.tables
    params = tables.params
    entries = tables.projection.entries
    cols = np.arange(cfg.n_draws) % index.n_cols
    # sign(P^T [q/|q|; 0]) with q = (x, e_c): the positive 1/|q| factor drops out
    projected = (x @ entries[: index.dim])[None, :] + entries[index.dim + cols]
    keys = _kernels.pack_keys(np.ascontiguousarray(projected), params.k_bits, params.n_tables)
    h, sizes = _kernels.mips_gumbel_max(
        keys,
        tables.table_ptr,
        tables.bucket_keys,
        tables.bucket_ptr,
        tables.members,
        model.weights,
        x,
        index.noise_cols,
        cols,
    )
    used = sizes > 0
    evals = int(sizes.sum())
    probes = cfg.n_draws * params.n_tables
    skipped = int(cfg.n_draws - used.sum())
    if skipped == cfg.n_draws:
        raise EstimatorError("every MIPS-Gumbel draw retrieved an empty candidate set")
    log_z = _inverse_estimate(h[used])
    return PartitionEstimate(
        z_hat=math.exp(log_z) if log_z < 709 else math.inf,
        n_samples=int(used.sum()),
        wall_time=time.perf_counter() - t0,
        estimator="mips_gumbel",
        log_z_hat=log_z,
        n_score_evals=evals,
        n_probes=probes,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# verification oracles
# ---------------------------------------------------------------------------


def _check_probs(model: LogLinearModel, probs: np.ndarray, f: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (model.state_count,):
        raise ValueError(f"probs has shape {probs.shape}, expected ({model.state_count},)")
    if np.any(probs > 1) or np.any(probs < 0):
        raise ValueError("probabilities must lie in (0, 1]")
    if np.any((probs == 0) & (f > 0)):
        raise ValueError("a state with positive score has zero selection probability")
    return probs


def bernoulli_oracle_estimate(
    model: LogLinearModel, x: np.ndarray, probs: np.ndarray, seed: int
) -> PartitionEstimate:
    """Select each state independently with probability p_i; sum f/p over
    the selected ones.  Theta(N) per call."""
    t0 = time.perf_counter()
    f = _scores(model_logits(model, x))
    probs = _check_probs(model, probs, f)
    sel = np.random.default_rng(seed).random(model.state_count) < probs
    z = float(np.sum(f[sel] / probs[sel]))
    return PartitionEstimate(
        z_hat=z,
        n_samples=int(sel.sum()),
        wall_time=time.perf_counter() - t0,
        estimator="bernoulli_oracle",
        n_score_evals=model.state_count,
    )


def analytic_variance_independent(model: LogLinearModel, x: np.ndarray, probs: np.ndarray) -> float:
    """sum f^2/p - sum f^2: the estimator variance under independent selection."""
    f = _scores(model_logits(model, x))
    probs = _check_probs(model, probs, f)
    if np.any(probs == 0):
        raise ValueError("zero selection probability")
    return float(np.sum(f * f / probs) - np.sum(f * f))


@dataclass(frozen=True)
class CovarianceReport:
    covariance_term: float
    independent_part: float
    lsh_variance: float
    lsh_mean: float
    exact_z: float
    trials: int

    @property
    def predicted_variance(self) -> float:
        return self.independent_part + self.covariance_term

    @property
    def relative_gap(self) -> float:
        return abs(self.lsh_variance - self.predicted_variance) / self.lsh_variance


def inclusion_matrix(
    tables_factory: Callable[[int], HashTableSet], x: np.ndarray, trials: int, first_seed: int = 0
) -> np.ndarray:
    """(trials, N) boolean matrix: was state i retrieved in build r."""
    rows = None
    for r in range(trials):
        tables = tables_factory(first_seed + r)
        if rows is None:
            rows = np.zeros((trials, tables.n_states), dtype=bool)
        rows[r, query_candidates(tables, x).ids] = True
    return rows


def empirical_covariance_term(
    tables_factory: Callable[[int], HashTableSet],
    model: LogLinearModel,
    x: np.ndarray,
    trials: int,
) -> CovarianceReport:
    """Estimate sum_{i != j} f_i f_j / (p_i p_j) Cov(1_i, 1_j) over ``trials``
    independent builds, and the LSH estimator's variance over a second,
    disjoint set of ``trials`` builds.

    ``tables_factory(seed)`` must build tables for ``model``.
    """
    x = _as_context(model, x)
    f = _scores(model.weights @ x)
    probe_tables = tables_factory(0)
    p = state_retrieval_probabilities(probe_tables, x)
    w = f / p

    ind = inclusion_matrix(tables_factory, x, trials, first_seed=0).astype(np.float64)
    if model.state_count < 2:
        cov_term = 0.0
    else:
        c = np.cov(ind, rowvar=False, ddof=1)
        cov_term = float(w @ c @ w - np.sum(w * w * np.diag(c)))

    ind2 = inclusion_matrix(tables_factory, x, trials, first_seed=trials)
    z = ind2 @ w
    return CovarianceReport(
        covariance_term=cov_term,
        independent_part=analytic_variance_independent(model, x, p),
        lsh_variance=float(np.var(z, ddof=1)) if trials > 1 else 0.0,
        lsh_mean=float(np.mean(z)),
        exact_z=float(np.sum(f)),
        trials=trials,
    )


def exact_estimate(model: LogLinearModel, x: np.ndarray) -> PartitionEstimate:
    t0 = time.perf_counter()
    lz = log_partition(model, x)
    return PartitionEstimate(
        z_hat=math.exp(lz) if lz < 709 else math.inf,
        n_samples=model.state_count,
        wall_time=time.perf_counter() - t0,
        estimator="exact",
        log_z_hat=lz,
        n_score_evals=model.state_count,
    )
