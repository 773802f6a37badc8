"""Hot inner loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and ``ZEST_DISABLE_NUMBA``
is unset (or ``0``).  Both paths must return identical results; the test
suite runs them against each other.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_requested() -> bool:
    flag = os.environ.get("ZEST_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by ZEST_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def pack_keys_numpy(projected: np.ndarray, k_bits: int, n_tables: int) -> np.ndarray:
    """Turn projections of shape (n, L*K) into L K-bit keys per row.

    Bit ``j`` of table ``t`` is set iff ``projected[:, t*K + j] >= 0``.
    """
    n = projected.shape[0]
    bits = (projected >= 0.0).reshape(n, n_tables, k_bits).astype(np.uint64)
    weights = np.left_shift(np.uint64(1), np.arange(k_bits, dtype=np.uint64))
    return (bits * weights).sum(axis=2).astype(np.uint32)


def probe_union_numpy(
    query_keys: np.ndarray,
    table_ptr: np.ndarray,
    bucket_keys: np.ndarray,
    bucket_ptr: np.ndarray,
    members: np.ndarray,
) -> tuple[np.ndarray, int]:
    """Union of one bucket per table, deduplicated and sorted ascending."""
    n_tables = query_keys.shape[0]
    found = []
    probes = 0
    for t in range(n_tables):
        lo, hi = table_ptr[t], table_ptr[t + 1]
        keys = bucket_keys[lo:hi]
        probes += 1
        pos = np.searchsorted(keys, query_keys[t])
        if pos < keys.shape[0] and keys[pos] == query_keys[t]:
            b = lo + pos
            found.append(members[bucket_ptr[b] : bucket_ptr[b + 1]])
    if not found:
        return np.empty(0, dtype=np.int64), probes
    return np.unique(np.concatenate(found)).astype(np.int64), probes


def rank_values_numpy(perturbed: np.ndarray, rank: int) -> np.ndarray:
    """``rank``-th largest value of every row (rank 1 is the max)."""
    n = perturbed.shape[1]
    if rank == 1:
        return perturbed.max(axis=1)
    return np.partition(perturbed, n - rank, axis=1)[:, n - rank]


def mips_gumbel_max_numpy(
    query_keys, table_ptr, bucket_keys, bucket_ptr, members, weights, x, noise_cols, cols
):
    """For each draw j: max over retrieved y of weights[y].x + noise_cols[cols[j], y].

    ``noise_cols`` is the (k, N) transposed noise so each column is
    contiguous.  Returns (h, sizes); sizes[j] == 0 marks a draw that
    retrieved nothing (h[j] is then -inf).
    """
    n_draws = query_keys.shape[0]
    h = np.full(n_draws, -np.inf)
    sizes = np.zeros(n_draws, dtype=np.int64)
    for j in range(n_draws):
        ids, _ = probe_union_numpy(query_keys[j], table_ptr, bucket_keys, bucket_ptr, members)
        if ids.shape[0]:
            h[j] = np.max(weights[ids] @ x + noise_cols[cols[j], ids])
            sizes[j] = ids.shape[0]
    return h, sizes


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def pack_keys_numba(projected, k_bits, n_tables):
        n = projected.shape[0]
        out = np.empty((n, n_tables), dtype=np.uint32)
        for i in range(n):
            for t in range(n_tables):
                key = np.uint32(0)
                base = t * k_bits
                for j in range(k_bits):
                    if projected[i, base + j] >= 0.0:
                        key |= np.uint32(1) << np.uint32(j)
                out[i, t] = key
        return out

    @njit(cache=True)
    def probe_union_numba(query_keys, table_ptr, bucket_keys, bucket_ptr, members):
        n_tables = query_keys.shape[0]
        starts = np.empty(n_tables, dtype=np.int64)
        stops = np.empty(n_tables, dtype=np.int64)
        total = 0
        probes = 0
        for t in range(n_tables):
            lo = table_ptr[t]
            hi = table_ptr[t + 1]
            key = query_keys[t]
            probes += 1
            # binary search for key in bucket_keys[lo:hi]
            a = lo
            b = hi
            while a < b:
                mid = (a + b) // 2
                if bucket_keys[mid] < key:
                    a = mid + 1
                else:
                    b = mid
            if a < hi and bucket_keys[a] == key:
                starts[t] = bucket_ptr[a]
                stops[t] = bucket_ptr[a + 1]
                total += stops[t] - starts[t]
            else:
                starts[t] = 0
                stops[t] = 0
        buf = np.empty(total, dtype=np.int64)
        k = 0
        for t in range(n_tables):
            for m in range(starts[t], stops[t]):
                buf[k] = members[m]
                k += 1
        if total == 0:
            return buf, probes
        buf.sort()
        n_unique = 1
        for m in range(1, total):
            if buf[m] != buf[n_unique - 1]:
                buf[n_unique] = buf[m]
                n_unique += 1
        return buf[:n_unique].copy(), probes

    @njit(cache=True)
    def rank_values_numba(perturbed, rank):
        n_rows, n = perturbed.shape
        out = np.empty(n_rows, dtype=np.float64)
        top = np.empty(rank, dtype=np.float64)
        for r in range(n_rows):
            # top holds the `rank` largest values seen so far, descending
            filled = 0
            for c in range(n):
                v = perturbed[r, c]
                if filled < rank:
                    pos = filled
                    filled += 1
                elif v > top[rank - 1]:
                    pos = rank - 1
                else:
                    continue
                while pos > 0 and top[pos - 1] < v:
                    top[pos] = top[pos - 1]
                    pos -= 1
                top[pos] = v
            out[r] = top[rank - 1]
        return out

    @njit(cache=True)
    def mips_gumbel_max_numba(
        query_keys, table_ptr, bucket_keys, bucket_ptr, members, weights, x, noise_cols, cols
    ):
        n_draws, n_tables = query_keys.shape
        n, dim = weights.shape
        h = np.full(n_draws, -np.inf)
        sizes = np.zeros(n_draws, dtype=np.int64)
        # logits are computed lazily, once per state; stamp[y] == j marks y
        # as already counted in draw j, so no sort/dedupe is needed
        lg = np.empty(n, dtype=np.float64)
        have = np.zeros(n, dtype=np.bool_)
        stamp = np.full(n, -1, dtype=np.int64)
        for j in range(n_draws):
            c = cols[j]
            best = -np.inf
            count = 0
            for t in range(n_tables):
                lo = table_ptr[t]
                hi = table_ptr[t + 1]
                key = query_keys[j, t]
                a = lo
                b = hi
                while a < b:
                    mid = (a + b) // 2
                    if bucket_keys[mid] < key:
                        a = mid + 1
                    else:
                        b = mid
                if a == hi or bucket_keys[a] != key:
                    continue
                for m in range(bucket_ptr[a], bucket_ptr[a + 1]):
                    y = members[m]
                    if stamp[y] == j:
                        continue
                    stamp[y] = j
                    count += 1
                    if not have[y]:
                        acc = 0.0
                        for d in range(dim):
                            acc += weights[y, d] * x[d]
                        lg[y] = acc
                        have[y] = True
                    v = lg[y] + noise_cols[c, y]
                    if v > best:
                        best = v
            h[j] = best
            sizes[j] = count
        return h, sizes

    pack_keys = pack_keys_numba
    probe_union = probe_union_numba
    rank_values = rank_values_numba
    mips_gumbel_max = mips_gumbel_max_numba
else:
    pack_keys = pack_keys_numpy
    probe_union = probe_union_numpy
    rank_values = rank_values_numpy
    mips_gumbel_max = mips_gumbel_max_numpy
