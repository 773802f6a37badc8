"""Signed random projections over MIPS-transformed vectors, (K, L) tables and
exact collision / retrieval probabilities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model_store import LogLinearModel

_NORM_SLACK = 1e-12


@dataclass(frozen=True)
class LshParams:
    k_bits: int = 10
    n_tables: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.k_bits <= 32:
            raise ValueError(f"k_bits must be in [1, 32], got {self.k_bits}")
        if self.n_tables < 1:
            raise ValueError(f"n_tables must be >= 1, got {self.n_tables}")

    @property
    def n_bits(self) -> int:
        return self.k_bits * self.n_tables


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    entries: np.ndarray
    seed: int

    @classmethod
    def draw(cls, in_dim: int, params: LshParams) -> "ProjectionMatrix":
        rng = np.random.default_rng(params.seed)
        e = rng.standard_normal((in_dim, params.n_bits))
        e.setflags(write=False)
        return cls(e, params.seed)

    @property
    def in_dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class HashTableSet:
    """L hash tables stored as flat sorted arrays.

    Table ``t`` owns buckets ``table_ptr[t]:table_ptr[t+1]``; bucket ``b`` has
    key ``bucket_keys[b]`` and members ``members[bucket_ptr[b]:bucket_ptr[b+1]]``.
    Only state ids are stored, never the vectors.
    """

    params: LshParams
    projection: ProjectionMatrix
    max_norm: float
    n_states: int
    table_ptr: np.ndarray
    bucket_keys: np.ndarray
    bucket_ptr: np.ndarray
    members: np.ndarray
    source: LogLinearModel | None = None

    def table(self, t: int) -> dict[int, np.ndarray]:
        lo, hi = self.table_ptr[t], self.table_ptr[t + 1]
        return {
            int(self.bucket_keys[b]): self.members[self.bucket_ptr[b] : self.bucket_ptr[b + 1]]
            for b in range(lo, hi)
        }

    @property
    def tables(self) -> list[dict[int, np.ndarray]]:
        return [self.table(t) for t in range(self.params.n_tables)]

    @property
    def n_stored(self) -> int:
        return int(self.members.shape[0])


@dataclass(frozen=True, eq=False)
class CandidateSet:
    ids: np.ndarray
    n_probes: int

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __contains__(self, state: int) -> bool:
        i = np.searchsorted(self.ids, state)
        return bool(i < self.ids.shape[0] and self.ids[i] == state)


def mips_transform_data(theta: np.ndarray, max_norm: float) -> np.ndarray:
    """[theta / M ; sqrt(1 - |theta|^2 / M^2)]; works row-wise on 2-D input."""
    theta = np.asarray(theta, dtype=np.float64)
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    scaled = theta / max_norm
    sq = np.sum(scaled * scaled, axis=-1, keepdims=True)
    if np.any(sq > 1.0 + _NORM_SLACK):
        raise ValueError("weight norm exceeds max_norm")
    tail = np.sqrt(np.clip(1.0 - sq, 0.0, None))
    return np.concatenate([scaled, tail], axis=-1)


def mips_transform_query(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        nx = math.sqrt(float(x @ x))
        if nx == 0:
            raise ValueError("context vector has zero norm")
        out = np.zeros(x.shape[0] + 1)
        np.divide(x, nx, out=out[:-1])
        return out
    nx = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(nx == 0):
        raise ValueError("context vector has zero norm")
    return np.concatenate([x / nx, np.zeros_like(nx)], axis=-1)


def fingerprint(v: np.ndarray, proj: ProjectionMatrix, params: LshParams) -> np.ndarray:
    """L keys (uint32) for a vector, or an (n, L) array for a batch of rows."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != proj.in_dim:
        raise ValueError(f"vector dim {v.shape[-1]} does not match projection dim {proj.in_dim}")
    if proj.entries.shape[1] != params.n_bits:
        raise ValueError("projection width does not match k_bits * n_tables")
    projected = np.atleast_2d(v) @ proj.entries
    keys = _kernels.pack_keys(np.ascontiguousarray(projected), params.k_bits, params.n_tables)
    return keys[0] if v.ndim == 1 else keys


def _model_max_norm(model: LogLinearModel) -> float:
    m = float(model.row_norms.max())
    # an all-zero model: any positive M gives the same transform
    return m if m > 0 else 1.0


def index_from_keys(
    keys: np.ndarray,
    params: LshParams,
    projection: ProjectionMatrix,
    max_norm: float,
    source: LogLinearModel | None = None,
) -> HashTableSet:
    """Bucket an (N, L) key matrix into L tables."""
    n, n_tables = keys.shape
    # one sort over (table, key) pairs; stable so bucket members stay ascending
    composite = (np.arange(n_tables, dtype=np.uint64)[:, None] << np.uint64(32)) | keys.T.astype(
        np.uint64
    )
    flat = composite.ravel()
    order = np.argsort(flat, kind="stable")
    ordered = flat[order]
    is_start = np.empty(ordered.shape[0], dtype=bool)
    is_start[0] = True
    np.not_equal(ordered[1:], ordered[:-1], out=is_start[1:])
    starts = np.flatnonzero(is_start)
    heads = ordered[starts]
    out = HashTableSet(
        params=params,
        projection=projection,
        max_norm=float(max_norm),
        n_states=n,
        table_ptr=np.searchsorted(heads >> np.uint64(32), np.arange(n_tables + 1, dtype=np.uint64)),
        bucket_keys=(heads & np.uint64(0xFFFFFFFF)).astype(np.uint32),
        bucket_ptr=np.append(starts, ordered.shape[0]).astype(np.int64),
        members=(order % n).astype(np.int32),
        source=source,
    )
    for a in (out.table_ptr, out.bucket_keys, out.bucket_ptr, out.members):
        a.setflags(write=False)
    return out


def build_tables(model: LogLinearModel, params: LshParams) -> HashTableSet:
    """Hash every weight row into all L tables."""
    max_norm = _model_max_norm(model)
    proj = ProjectionMatrix.draw(model.dim + 1, params)
    keys = fingerprint(mips_transform_data(model.weights, max_norm), proj, params)
    return index_from_keys(keys, params, proj, max_norm, source=model)


def probe(tables: HashTableSet, query_keys: np.ndarray) -> CandidateSet:
    ids, probes = _kernels.probe_union(
        np.ascontiguousarray(query_keys, dtype=np.uint32),
        tables.table_ptr,
        tables.bucket_keys,
        tables.bucket_ptr,
        tables.members,
    )
    return CandidateSet(ids, int(probes))


def query_candidates(tables: HashTableSet, x: np.ndarray) -> CandidateSet:
    """Union of the one bucket per table that ``x`` hashes to."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tables.projection.in_dim - 1,):
        raise ValueError(
            f"context has shape {x.shape}, expected ({tables.projection.in_dim - 1},)"
        )
    q = mips_transform_query(x)
    return probe(tables, fingerprint(q, tables.projection, tables.params))


def collision_probability(theta: np.ndarray, x: np.ndarray, max_norm: float) -> np.ndarray | float:
    """Per-bit collision probability 1 - angle/pi between transformed vectors.

    ``theta`` may be a single row or an (n, D) matrix.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    nx = float(np.linalg.norm(x))
    if nx == 0:
        raise ValueError("context vector has zero norm")
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norms = np.linalg.norm(theta, axis=-1)
    if np.any(norms > max_norm * (1 + _NORM_SLACK)):
        raise ValueError("weight norm exceeds max_norm")
    cos = np.clip((theta @ x) / (max_norm * nx), -1.0, 1.0)
    p = 1.0 - np.arccos(cos) / np.pi
    return float(p) if np.ndim(p) == 0 else p


def retrieval_probability(p, k_bits: int, n_tables: int):
    """1 - (1 - p^K)^L, evaluated without cancellation for small p^K."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("collision probability outside [0, 1]")
    with np.errstate(divide="ignore"):
        out = -np.expm1(n_tables * np.log1p(-(p**k_bits)))
    return float(out) if out.ndim == 0 else out


def expected_candidate_count(
    model: LogLinearModel, contexts: np.ndarray, k_bits: int, n_tables: int
) -> float:
    """Mean over contexts of E|S| = sum_y P(y retrieved), for fresh tables."""
    max_norm = _model_max_norm(model)
    total = 0.0
    contexts = np.atleast_2d(contexts)
    for x in contexts:
        p = collision_probability(model.weights, x, max_norm)
        total += float(np.sum(retrieval_probability(p, k_bits, n_tables)))
    return total / contexts.shape[0]


def choose_k_bits(
    model: LogLinearModel,
    contexts: np.ndarray,
    n_tables: int,
    target: float,
    k_max: int = 24,
) -> int:
    """Largest K whose median (over contexts) expected candidate count
    still reaches ``target``.

    E|S| is non-increasing in K, so the search walks K upward and stops at
    the first K that falls short.  Returns 1 if even K = 1 falls short.
    """
    contexts = np.atleast_2d(contexts)
    max_norm = _model_max_norm(model)
    ps = [collision_probability(model.weights, x, max_norm) for x in contexts]
    best = 1
    for k in range(1, k_max + 1):
        size = np.median([np.sum(retrieval_probability(p, k, n_tables)) for p in ps])
        if size < target:
            break
        best = k
    return best


def state_retrieval_probabilities(
    tables: HashTableSet, x: np.ndarray, ids: np.ndarray | None = None
) -> np.ndarray:
    """Exact inclusion probability of each state (or of ``ids``) for query x.

    Uses the weights the tables were built from, which is what the hash
    keys reflect even when the caller's model has since moved on.
    """
    if tables.source is None:
        raise ValueError("tables carry no source model")
    x = np.asarray(x, dtype=np.float64)
    nx = math.sqrt(float(x @ x))
    if nx == 0:
        raise ValueError("context vector has zero norm")
    w = tables.source.weights if ids is None else tables.source.weights[ids]
    # build_tables guarantees every source row fits under max_norm, so the
    # range checks of the public helpers are skipped on this hot path
    cos = np.clip((w @ x) / (tables.max_norm * nx), -1.0, 1.0)
    p = 1.0 - np.arccos(cos) / np.pi
    k, n_tables = tables.params.k_bits, tables.params.n_tables
    with np.errstate(divide="ignore"):
        return -np.expm1(n_tables * np.log1p(-(p**k)))
