"""Flat softmax classifier trained by SGD with an estimated partition function.

The true-label row gets ``(1 - f(y)/Z_hat) x``; every other sampled row k
gets ``-(f(k) / (p_k Z_hat)) x``.  The importance-weighted numerator
``f(k)/p_k`` is unbiased for ``f(k)``; dividing by the sampled ``Z_hat``
makes each step a ratio estimate, whose bias shrinks as the sample grows.
Updates are averaged over the batch.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimators import (
    GumbelConfig,
    NonFiniteScoreError,
    derive_seed,
    exact_gumbel_estimate,
    lsh_budget_estimate,
    mips_gumbel_estimate,
    uniform_samples,
)
from .lsh_core import HashTableSet, LshParams, build_tables, choose_k_bits
from .model_store import ContextBatch, LabeledDataset, LogLinearModel, log_partition

METHODS = ("exact", "lsh", "uniform_is", "exact_gumbel", "mips_gumbel")


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, report: "TrainReport") -> None:
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 5
    batch_size: int = 32
    estimator: str = "exact"
    sample_budget: int = 100
    table_rebuild_period: int = 50
    seed: int = 0
    k_bits: int | None = None  # None: re-tuned at each rebuild to reach sample_budget
    n_tables: int = 16
    gumbel_draws: int = 50
    mips_k_bits: int = 5
    mips_tables: int = 16
    drift_probes: int = 8

    def __post_init__(self) -> None:
        if self.estimator not in METHODS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {METHODS}")
        for name in ("learning_rate", "epochs", "batch_size", "sample_budget", "table_rebuild_period"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainReport:
    method: str
    epoch_loss: list[float] = field(default_factory=list)
    epoch_time: list[float] = field(default_factory=list)
    touched_fraction: list[float] = field(default_factory=list)
    test_perplexity: float = math.nan
    skipped_examples: int = 0
    rebuilds: int = 0
    # (step, mean |ln Z_hat - ln Z| with stale tables, same right after rebuild)
    rebuild_drift: list[tuple[int, float, float]] = field(default_factory=list)
    k_bits_history: list[int] = field(default_factory=list)
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EstimatorContext:
    """Mutable per-run sampler state: current tables and counters."""

    cfg: TrainConfig
    tables: HashTableSet | None = None
    steps_since_rebuild: int = 0
    step: int = 0
    draws: int = 0
    skipped: int = 0
    rebuilds: int = 0
    drift: list[tuple[int, float, float]] = field(default_factory=list)
    k_history: list[int] = field(default_factory=list)

    def next_seed(self) -> int:
        self.draws += 1
        return derive_seed(self.cfg.seed, 0, self.draws)

    def sync(self, model: LogLinearModel, probe_x: np.ndarray | None = None) -> None:
        """Rebuild LSH tables if missing or older than the rebuild period."""
        if self.cfg.estimator != "lsh":
            return
        if self.tables is not None and self.steps_since_rebuild < self.cfg.table_rebuild_period:
            return
        stale = self.tables
        k_bits = self.cfg.k_bits
        if k_bits is None:
            k_bits = choose_k_bits(model, probe_x, self.cfg.n_tables, self.cfg.sample_budget)
        self.k_history.append(k_bits)
        params = LshParams(k_bits, self.cfg.n_tables, derive_seed(self.cfg.seed, 1, self.rebuilds))
        self.tables = build_tables(model, params)
        if stale is not None and probe_x is not None and len(probe_x):
            before = _mean_log_error(stale, model, probe_x, self.cfg.sample_budget)
            after = _mean_log_error(self.tables, model, probe_x, self.cfg.sample_budget)
            self.drift.append((self.step, before, after))
        self.rebuilds += 1
        self.steps_since_rebuild = 0


def _mean_log_error(tables, model, xs, budget) -> float:
    errs = []
    for i, x in enumerate(xs):
        est, _ = lsh_budget_estimate(tables, model, x, budget, seed=i, allow_stale=True)
        if est.z_hat > 0:
            errs.append(abs(est.log_z_hat - log_partition(model, x)))
    return float(np.mean(errs)) if errs else math.inf


def _sampled_negatives(model, x, ctx):
    """(ids, 1/p, logits) for one example's sample set."""
    cfg = ctx.cfg
    if cfg.estimator == "lsh":
        _, s = lsh_budget_estimate(
            ctx.tables, model, x, cfg.sample_budget, ctx.next_seed(), allow_stale=True
        )
        return s.ids, 1.0 / s.probs, s.logits
    ids, lg = uniform_samples(model, x, cfg.sample_budget, ctx.next_seed())
    return ids, np.full(ids.shape[0], model.state_count / cfg.sample_budget), lg


def _gumbel_z(model, x, ctx) -> float:
    cfg = ctx.cfg
    gcfg = GumbelConfig(cfg.gumbel_draws, seed=ctx.next_seed())
    if cfg.estimator == "exact_gumbel":
        return exact_gumbel_estimate(model, x, gcfg).z_hat
    params = LshParams(cfg.mips_k_bits, cfg.mips_tables, gcfg.seed)
    return mips_gumbel_estimate(model, x, gcfg, params, seed=gcfg.seed).z_hat


def _exp(lg: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        f = np.exp(lg)
    if not np.all(np.isfinite(f)):
        raise NonFiniteScoreError("exp(logit) overflowed during training")
    return f


def _apply(model: LogLinearModel, grad: np.ndarray, scale: float) -> LogLinearModel:
    with np.errstate(over="ignore", invalid="ignore"):
        w = model.weights + scale * grad
    if not np.all(np.isfinite(w)):
        raise NonFiniteScoreError("weights became non-finite")
    return LogLinearModel(w)


def negative_terms(
    model: LogLinearModel, x: np.ndarray, y: int, ctx: EstimatorContext
) -> tuple[np.ndarray, np.ndarray, float] | None:
    """Rows other than ``y`` that receive a negative update, with weights.

    Returns ``(ids, w, z_hat)``; row k's update is ``-(w_k / z_hat) x``.
    For sampled estimators ``w_k = f(k)/p_k`` and
    ``z_hat = f(y) + sum(w)``; for Gumbel estimators every other row is
    included with ``w_k = f(k)``.  ``None`` means the sample was empty.
    """
    n = model.state_count
    f_y = float(_exp(np.array(model.weights[y] @ x)))
    if ctx.cfg.estimator in ("lsh", "uniform_is"):
        ids, inv_p, lg = _sampled_negatives(model, x, ctx)
        if ids.shape[0] == 0:
            return None
        keep = ids != y
        w = _exp(lg[keep]) * inv_p[keep]
        # the label's own term is exact; the rest is the unbiased sample sum
        return ids[keep], w, f_y + float(np.sum(w))
    z_hat = _gumbel_z(model, x, ctx)
    if not z_hat > 0:
        return None
    ids = np.flatnonzero(np.arange(n) != y)
    return ids, _exp(model.weights[ids] @ x), z_hat


def sgd_step(
    model: LogLinearModel,
    contexts: np.ndarray,
    labels: np.ndarray,
    ctx: EstimatorContext,
) -> tuple[LogLinearModel, float, float]:
    """One minibatch update.

    Returns the new model, the mean (estimated) negative log-likelihood of
    the batch, and the mean fraction of states whose scores were evaluated.
    Examples whose sample set is empty are skipped and counted in ``ctx``.
    """
    cfg = ctx.cfg
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, _ = model.weights.shape
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError("label out of range")
    b = labels.shape[0]

    if cfg.estimator == "exact":
        # overflowing logits surface as a non-finite loss, which train() reports
        with np.errstate(over="ignore", invalid="ignore"):
            lg = contexts @ model.weights.T
            m = lg.max(axis=1, keepdims=True)
            e = np.exp(lg - m)
            z = e.sum(axis=1, keepdims=True)
            prob = e / z
            coef = -prob
            coef[np.arange(b), labels] += 1.0
            grad = coef.T @ contexts
            log_z = (m + np.log(z))[:, 0]
            loss = float(np.mean(log_z - lg[np.arange(b), labels]))
        new = _apply(model, grad, cfg.learning_rate / b)
        ctx.step += 1
        return new, loss, 1.0

    ctx.sync(model, probe_x=contexts[: cfg.drift_probes])
    grad = np.zeros_like(model.weights)
    losses = []
    touched = []
    for x, y in zip(contexts, labels):
        logit_y = float(model.weights[y] @ x)
        f_y = float(_exp(np.array(logit_y)))
        terms = negative_terms(model, x, int(y), ctx)
        if terms is None:
            ctx.skipped += 1
            continue
        ids, w, z_hat = terms
        n_touched = ids.shape[0] + 1
        np.add.at(grad, ids, (-w / z_hat)[:, None] * x[None, :])
        grad[y] += (1.0 - f_y / z_hat) * x
        losses.append(math.log(z_hat) - logit_y)
        touched.append(n_touched / n)
    ctx.step += 1
    ctx.steps_since_rebuild += 1
    if not losses:
        return model, math.nan, 0.0
    new = _apply(model, grad, cfg.learning_rate / b)
    return new, float(np.mean(losses)), float(np.mean(touched))


def perplexity(model: LogLinearModel, data: LabeledDataset, chunk: int = 1024) -> float:
    """exp(mean negative log-likelihood) with the exact partition function."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    x = data.contexts.contexts
    total = 0.0
    for start in range(0, len(data), chunk):
        xb = x[start : start + chunk]
        yb = data.labels[start : start + chunk]
        lg = xb @ model.weights.T
        m = lg.max(axis=1, keepdims=True)
        log_z = m[:, 0] + np.log(np.exp(lg - m).sum(axis=1))
        total += float(np.sum(log_z - lg[np.arange(len(yb)), yb]))
    mean = total / len(data)
    # past ~709 nats the perplexity is not representable as a float
    return math.exp(mean) if mean < 709.0 else math.inf


def train(
    model: LogLinearModel,
    train_data: LabeledDataset,
    test_data: LabeledDataset,
    cfg: TrainConfig,
) -> tuple[LogLinearModel, TrainReport]:
    if train_data.contexts.dim != model.dim or test_data.contexts.dim != model.dim:
        raise ValueError("dataset dim does not match the model")
    ctx = EstimatorContext(cfg)
    report = TrainReport(cfg.estimator)
    rng = np.random.default_rng(cfg.seed)
    x_all = train_data.contexts.contexts
    y_all = train_data.labels
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_data))
        losses, weights, touched = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                model, loss, frac = sgd_step(model, x_all[idx], y_all[idx], ctx)
            except NonFiniteScoreError as exc:
                loss, frac = math.inf, 0.0
                cause = str(exc)
            else:
                cause = "non-finite training loss"
            if math.isnan(loss) and frac == 0.0:
                continue  # every example in the batch was skipped
            if not math.isfinite(loss):
                report.diverged = True
                _finish(report, ctx)
                raise DivergenceError(f"epoch {epoch}: {cause}", report)
            losses.append(loss)
            weights.append(len(idx))
            touched.append(frac)
        report.epoch_loss.append(float(np.average(losses, weights=weights)) if losses else math.nan)
        report.touched_fraction.append(float(np.mean(touched)) if touched else 0.0)
        report.epoch_time.append(time.perf_counter() - t0)
    _finish(report, ctx)
    report.test_perplexity = perplexity(model, test_data)
    return model, report


def _finish(report: TrainReport, ctx: EstimatorContext) -> None:
    report.skipped_examples = ctx.skipped
    report.rebuilds = ctx.rebuilds
    report.rebuild_drift = list(ctx.drift)
    report.k_bits_history = list(ctx.k_history)


# ---------------------------------------------------------------------------
# data sources
# ---------------------------------------------------------------------------


def _sample_labels(teacher: LogLinearModel, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lg = x @ teacher.weights.T
    lg -= lg.max(axis=1, keepdims=True)
    p = np.exp(lg)
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random((x.shape[0], 1))
    return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), teacher.state_count - 1)


def make_classification_task(
    n_states: int,
    dim: int,
    n_train: int,
    n_test: int,
    scale: float = 1.0,
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset, LogLinearModel]:
    """Labels drawn from a random teacher softmax over unit-norm contexts.

    Teacher rows are N(0, scale^2 I); returns (train, test, teacher).
    """
    rng = np.random.default_rng(seed)
    teacher = LogLinearModel(rng.normal(0.0, scale, size=(n_states, dim)))
    x = rng.standard_normal((n_train + n_test, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = _sample_labels(teacher, x, rng)
    train_set = LabeledDataset(ContextBatch(x[:n_train]), y[:n_train], n_states)
    test_set = LabeledDataset(ContextBatch(x[n_train:]), y[n_train:], n_states)
    return train_set, test_set, teacher


def teacher_dataset(
    teacher: LogLinearModel, contexts: np.ndarray, test_fraction: float = 0.1, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Label fixed contexts by sampling from ``teacher``'s softmax."""
    x = np.asarray(contexts, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two contexts to split train/test")
    y = _sample_labels(teacher, x, np.random.default_rng(seed))
    cut = min(x.shape[0] - 1, max(1, int(round(x.shape[0] * (1 - test_fraction)))))
    n = teacher.state_count
    return (
        LabeledDataset(ContextBatch(x[:cut]), y[:cut], n),
        LabeledDataset(ContextBatch(x[cut:]), y[cut:], n),
    )


UNK = "<unk>"


def corpus_dataset(
    text: str, context_window: int = 1, test_fraction: float = 0.1
) -> tuple[LabeledDataset, LabeledDataset, list[str]]:
    """Next-token pairs from whitespace-tokenized text.

    The vocabulary comes from the training split (first 1 - test_fraction
    of tokens) plus ``<unk>``.  Each context is the bag (counts) of the
    previous ``context_window`` tokens as a dense vector of length V.
    """
    tokens = text.split()
    if len(tokens) < 4:
        raise ValueError("corpus too small")
    if context_window < 1:
        raise ValueError("context_window must be >= 1")
    cut = max(2, int(round(len(tokens) * (1 - test_fraction))))
    counts = Counter(tokens[:cut])
    vocab = [UNK] + sorted(counts, key=lambda w: (-counts[w], w))
    index = {w: i for i, w in enumerate(vocab)}
    ids = np.array([index.get(w, 0) for w in tokens], dtype=np.int64)

    def pairs(lo: int, hi: int) -> LabeledDataset:
        pos = np.arange(max(lo, 1), hi)
        x = np.zeros((pos.shape[0], len(vocab)))
        for back in range(1, context_window + 1):
            src = pos - back
            ok = src >= 0
            np.add.at(x, (np.flatnonzero(ok), ids[src[ok]]), 1.0)
        return LabeledDataset(ContextBatch(x), ids[pos], len(vocab))

    return pairs(0, cut), pairs(cut, len(tokens)), vocab
