"""Log-linear model data, synthetic generation, snapshot I/O and exact scoring."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"ZEST1"
_HEADER = struct.Struct("<5sQQQ")


class SnapshotError(ValueError):
    """Base class for snapshot decoding failures."""


class SnapshotHeaderError(SnapshotError):
    pass


class SnapshotDimError(SnapshotError):
    pass


class SnapshotTruncatedError(SnapshotError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LogLinearModel:
    """N states, each with a D-dimensional weight row."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError(f"weights must be a non-empty 2-D matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite entries")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def state_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def row(self, state: int) -> np.ndarray:
        if not 0 <= state < self.state_count:
            raise IndexError(f"state {state} out of range [0, {self.state_count})")
        return self.weights[state]

    @cached_property
    def digest(self) -> str:
        """Content hash; used to detect hash tables built from other weights."""
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<QQ", *self.weights.shape))
        h.update(self.weights.tobytes())
        return h.hexdigest()

    @cached_property
    def row_norms(self) -> np.ndarray:
        n = np.linalg.norm(self.weights, axis=1)
        n.setflags(write=False)
        return n


@dataclass(frozen=True, eq=False)
class ContextBatch:
    contexts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.contexts, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] < 1:
            raise ValueError(f"contexts must be a 2-D matrix, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("contexts contain non-finite entries")
        zero = ~np.any(c != 0.0, axis=1)
        if np.any(zero):
            raise ValueError(f"context rows {np.flatnonzero(zero)[:5].tolist()} are all zero")
        object.__setattr__(self, "contexts", _frozen(c))

    def __len__(self) -> int:
        return self.contexts.shape[0]

    @property
    def dim(self) -> int:
        return self.contexts.shape[1]


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    contexts: ContextBatch
    labels: np.ndarray
    n_states: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != len(self.contexts):
            raise ValueError("labels must be 1-D with one entry per context")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_states):
            raise ValueError(f"labels must lie in [0, {self.n_states})")
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class Snapshot:
    model: LogLinearModel
    contexts: ContextBatch
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.model.dim != self.contexts.dim:
            raise ValueError(
                f"model dim {self.model.dim} does not match context dim {self.contexts.dim}"
            )


def generate_synthetic(
    n_states: int,
    dim: int,
    n_contexts: int,
    scale: float = 1.0,
    seed: int = 0,
    name: str = "synthetic",
) -> Snapshot:
    """Draw i.i.d. N(0, scale^2) weights and contexts.

    Weights are drawn before contexts from a single ``default_rng(seed)``
    stream, so the same arguments always give the same snapshot.
    """
    if n_states < 1 or dim < 1 or n_contexts < 1:
        raise ValueError("n_states, dim and n_contexts must be positive")
    if not math.isfinite(scale) or scale < 0:
        raise ValueError(f"scale must be finite and non-negative, got {scale}")
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, scale, size=(n_states, dim))
    contexts = rng.normal(0.0, scale, size=(n_contexts, dim))
    meta = {
        "name": name,
        "seed": seed,
        "n_states": n_states,
        "dim": dim,
        "n_contexts": n_contexts,
        "scale": scale,
    }
    return Snapshot(LogLinearModel(weights), ContextBatch(contexts), meta)


def logits(model: LogLinearModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"context has shape {x.shape}, expected ({model.dim},)")
    return model.weights @ x


def unnormalized_score(model: LogLinearModel, state: int, x: np.ndarray) -> float:
    """exp(theta_state . x).  Saturates to +inf on overflow."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"context has shape {x.shape}, expected ({model.dim},)")
    with np.errstate(over="ignore"):
        return float(np.exp(model.row(state) @ x))


def log_partition(model: LogLinearModel, x: np.ndarray) -> float:
    phi = logits(model, x)
    m = phi.max()
    return float(m + np.log(np.exp(phi - m).sum()))


def exact_partition(model: LogLinearModel, x: np.ndarray) -> float:
    """Brute-force Z = sum_y exp(theta_y . x) with a max shift."""
    phi = logits(model, x)
    m = phi.max()
    with np.errstate(over="ignore"):
        return float(np.exp(m) * np.exp(phi - m).sum())


# ---------------------------------------------------------------------------
# snapshot file format
# ---------------------------------------------------------------------------
#
#   b"ZEST1" | N u64 | D u64 | M u64 | weights N*D f64 | contexts M*D f64
#   [ metadata length u64 | metadata UTF-8 JSON ]      (optional trailer)
#
# All integers and floats little-endian.


def save_snapshot(s: Snapshot, path: str | Path) -> None:
    n, d = s.model.weights.shape
    m = len(s.contexts)
    meta = dict(s.metadata)
    meta.setdefault("n_states", n)
    meta.setdefault("dim", d)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, d, m))
        fh.write(s.model.weights.astype("<f8").tobytes(order="C"))
        fh.write(s.contexts.contexts.astype("<f8").tobytes(order="C"))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_snapshot(path: str | Path) -> Snapshot:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise SnapshotHeaderError(f"{path}: bad magic")
        raise SnapshotTruncatedError(f"{path}: file shorter than header")
    magic, n, d, m = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotHeaderError(f"{path}: bad magic {magic!r}")
    if n == 0 or d == 0 or m == 0:
        raise SnapshotHeaderError(f"{path}: header has N={n}, D={d}, M={m}; all must be >= 1")
    off = _HEADER.size
    n_w, n_c = n * d * 8, m * d * 8
    if len(data) < off + n_w + n_c:
        raise SnapshotTruncatedError(
            f"{path}: expected {off + n_w + n_c} payload bytes, found {len(data)}"
        )
    weights = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    contexts = np.frombuffer(data, dtype="<f8", count=m * d, offset=off + n_w).reshape(m, d)
    off += n_w + n_c

    meta: dict[str, Any] = {}
    if off < len(data):
        if len(data) < off + 8:
            raise SnapshotTruncatedError(f"{path}: truncated metadata length")
        (n_meta,) = struct.unpack_from("<Q", data, off)
        off += 8
        if len(data) < off + n_meta:
            raise SnapshotTruncatedError(f"{path}: truncated metadata block")
        try:
            meta = json.loads(data[off : off + n_meta].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SnapshotHeaderError(f"{path}: unreadable metadata: {exc}") from exc
        if len(data) != off + n_meta:
            raise SnapshotDimError(
                f"{path}: {len(data) - off - n_meta} trailing bytes do not fit N={n}, D={d}, M={m}"
            )
        if meta.get("dim", d) != d or meta.get("n_states", n) != n:
            raise SnapshotDimError(
                f"{path}: metadata records N={meta.get('n_states')}, D={meta.get('dim')}"
                f" but header has N={n}, D={d}"
            )

    return Snapshot(LogLinearModel(weights), ContextBatch(contexts), meta)
