"""Flat exact k-NN index over normalized embeddings and distance-based scoring.

Distances are plain Euclidean, accumulated coordinate by coordinate in IEEE
order (no dot-product shortcut: sqrt(2 - 2<z, z'>) cancels catastrophically
near zero distance). Search is exact: a partial selection of the k smallest
distances, never an approximation. The jitted kernels keep per-query results
independent, so batched scoring is bit-identical to one query at a time.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import numba
from numba import njit, prange

from .detectors import ScoreVector
from .embed_io import EmbeddingSet, _read_emb1_bytes, _write_emb1_bytes

# skip the TBB probe; omp is present and keeps per-query results independent
numba.config.THREADING_LAYER = "omp"

KNN_MAGIC = b"KNN1"
_KNN_HEADER = struct.Struct("<4sIIdIQ")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class KnnIndex:
    """Immutable store of retained training embeddings.

    ``unit`` is True for the normal, sphere-resident index; the raw-feature
    variant (unit=False) exists only for the normalization ablation.
    """

    vectors: np.ndarray
    sample_ratio: float
    base_k: int
    effective_k: int
    seed: int
    unit: bool = True

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class NeighborQueryResult:
    r_k: float
    r_avg: float
    k_used: int


# ---------------------------------------------------------------------------
# kernels: strict IEEE arithmetic, sequential accumulation over coordinates,
# sorted heads so that averages have one canonical summation order.


@njit(cache=True)
def _sorted_head(vectors, q, k):
    n, m = vectors.shape
    d = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(m):
            t = vectors[i, j] - q[j]
            s += t * t
        d[i] = math.sqrt(s)
    head = np.partition(d, k - 1)[:k].copy()
    head.sort()
    return head


@njit(cache=True)
def _rk_ravg(vectors, q, k, exclude_one_zero):
    need = k + 1 if exclude_one_zero else k
    head = _sorted_head(vectors, q, need)
    lo = 1 if (exclude_one_zero and head[0] == 0.0) else 0
    acc = 0.0
    for i in range(lo, lo + k):
        acc += head[i]
    return head[lo + k - 1], acc / k


@njit(parallel=True, cache=True)
def _rk_ravg_batch(vectors, queries, k, exclude_one_zero):
    nq = queries.shape[0]
    rk = np.empty(nq)
    ravg = np.empty(nq)
    for qi in prange(nq):
        a, b = _rk_ravg(vectors, queries[qi], k, exclude_one_zero)
        rk[qi] = a
        ravg[qi] = b
    return rk, ravg


@njit(parallel=True, cache=True)
def _multi_k_batch(vectors, queries, ks):
    # ks ascending; per-k averages use the same sequential prefix order as
    # _rk_ravg so sweep metrics equal single-k scoring exactly.
    nq = queries.shape[0]
    nk = ks.shape[0]
    kmax = ks[nk - 1]
    rk = np.empty((nq, nk))
    ravg = np.empty((nq, nk))
    for qi in prange(nq):
        head = _sorted_head(vectors, queries[qi], kmax)
        acc = 0.0
        pos = 0
        for i in range(kmax):
            acc += head[i]
            if pos < nk and ks[pos] == i + 1:
                rk[qi, pos] = head[i]
                ravg[qi, pos] = acc / (i + 1)
                pos += 1
    return rk, ravg


# ---------------------------------------------------------------------------


def build_index(
    e: EmbeddingSet,
    alpha: float = 1.0,
    base_k: int = 1,
    seed: int = 0,
    unit_check: bool = True,
) -> KnnIndex:
    """Build a flat index over ``e``, keeping a random alpha-fraction of rows.

    alpha=1 retains every row in its original order. Otherwise
    round(alpha * n) rows are drawn without replacement from a generator
    seeded with ``seed``, and the operating k shrinks proportionally:
    effective_k = max(1, round(base_k * alpha)).

    ``unit_check=False`` admits raw (unnormalized) vectors; only the
    normalization-ablation path should use it.
    """
    if not (0 < alpha <= 1):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if base_k < 1:
        raise ValueError(f"base_k must be positive, got {base_k}")
    if unit_check and not e.normalized:
        raise ValueError("index expects a normalized embedding set "
                         "(or pass unit_check=False for raw features)")
    n = e.n
    if alpha == 1.0:
        kept = e.data
        n_kept = n
    else:
        n_kept = _round_half_up(alpha * n)
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=n_kept, replace=False))
        kept = e.data[idx]
    effective_k = max(1, _round_half_up(base_k * alpha))
    if n_kept < effective_k:
        raise ValueError(
            f"retained {n_kept} rows < effective k {effective_k}; "
            "raise alpha or lower base_k"
        )
    return KnnIndex(
        vectors=np.ascontiguousarray(kept, dtype=np.float64),
        sample_ratio=float(alpha),
        base_k=int(base_k),
        effective_k=int(effective_k),
        seed=int(seed),
        unit=bool(unit_check),
    )


def _check_k(idx: KnnIndex, k: int, exclude_one_zero: bool = False) -> None:
    top = idx.n - 1 if exclude_one_zero else idx.n
    if not (1 <= k <= top):
        raise ValueError(f"k={k} out of range [1, {top}] for index of {idx.n} rows")


def query_knn(
    idx: KnnIndex, z: np.ndarray, k: int, exclude_self_distance_zero: bool = False
) -> NeighborQueryResult:
    """Exact k-th and averaged-k nearest-neighbor distances for one query."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != idx.dim:
        raise ValueError(f"query must be a length-{idx.dim} vector")
    if idx.unit and abs(np.linalg.norm(z) - 1.0) > 1e-6:
        raise ValueError("query is not unit-norm; normalize it first")
    _check_k(idx, k, exclude_self_distance_zero)
    r_k, r_avg = _rk_ravg(idx.vectors, z, k, exclude_self_distance_zero)
    return NeighborQueryResult(r_k=float(r_k), r_avg=float(r_avg), k_used=k)


def score_knn(
    idx: KnnIndex,
    queries: EmbeddingSet,
    k: int,
    variant: str = "kth",
    exclude_self_distance_zero: bool = False,
) -> ScoreVector:
    """Score every query row: negated k-th (or averaged-k) neighbor distance,
    so that higher means more in-distribution."""
    if variant not in ("kth", "kavg"):
        raise ValueError(f"variant must be 'kth' or 'kavg', got {variant!r}")
    if idx.unit and not queries.normalized:
        raise ValueError("queries must be normalized for a unit index")
    if queries.dim != idx.dim:
        raise ValueError(f"query dim {queries.dim} != index dim {idx.dim}")
    _check_k(idx, k, exclude_self_distance_zero)
    rk, ravg = _rk_ravg_batch(
        idx.vectors, queries.data, k, exclude_self_distance_zero
    )
    scores = -(rk if variant == "kth" else ravg)
    return ScoreVector(scores=scores, detector_tag=f"knn_{variant}_k{k}")


def score_knn_multi(
    idx: KnnIndex, queries: EmbeddingSet, ks: list[int], variant: str = "kth"
) -> dict[int, ScoreVector]:
    """Scores for several k values from one pass over the index.

    Values are identical to calling :func:`score_knn` per k.
    """
    if variant not in ("kth", "kavg"):
        raise ValueError(f"variant must be 'kth' or 'kavg', got {variant!r}")
    if idx.unit and not queries.normalized:
        raise ValueError("queries must be normalized for a unit index")
    ks_sorted = sorted(set(int(k) for k in ks))
    for k in ks_sorted:
        _check_k(idx, k)
    rk, ravg = _multi_k_batch(
        idx.vectors, queries.data, np.asarray(ks_sorted, dtype=np.int64)
    )
    vals = rk if variant == "kth" else ravg
    return {
        k: ScoreVector(scores=-vals[:, i], detector_tag=f"knn_{variant}_k{k}")
        for i, k in enumerate(ks_sorted)
    }


def decide(scores: ScoreVector | np.ndarray, lam: float) -> np.ndarray:
    """Level-set decision: True (ID) where score >= lambda, boundary included."""
    s = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores)
    return s >= lam


# ---------------------------------------------------------------------------
# snapshot format


def save_index(idx: KnnIndex, path: str) -> None:
    header = _KNN_HEADER.pack(
        KNN_MAGIC, idx.n, idx.dim, idx.sample_ratio, idx.effective_k, idx.seed
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_write_emb1_bytes(idx.vectors, None))


def load_index(path: str, unit: bool = True) -> KnnIndex:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _KNN_HEADER.size:
        raise ValueError(f"{path}: truncated index header")
    magic, n, m, alpha, eff_k, seed = _KNN_HEADER.unpack_from(raw, 0)
    if magic != KNN_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {KNN_MAGIC!r}")
    data, _ = _read_emb1_bytes(raw[_KNN_HEADER.size:], path)
    if data.shape != (n, m):
        raise ValueError(f"{path}: payload shape {data.shape} != header ({n}, {m})")
    # the snapshot does not carry base_k; the loaded index operates on
    # effective_k, which is what scoring uses.
    return KnnIndex(
        vectors=np.ascontiguousarray(data),
        sample_ratio=float(alpha),
        base_k=int(eff_k),
        effective_k=int(eff_k),
        seed=int(seed),
        unit=unit,
    )
