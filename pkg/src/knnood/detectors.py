"""Baseline OOD scorers on the shared convention: higher score = more ID.

Logit-based baselines (MSP, energy) are pure functions of a LogitSet.
Mahalanobis fits class centroids with one pooled covariance and scores
through its Cholesky factor; the covariance inverse is never formed.
LOF and the PCA residual follow their standard constructions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .embed_io import EmbeddingSet, _read_emb1_bytes, _write_emb1_bytes

MDL_MAGIC = b"MDL1"
_KIND_GAUSSIAN = 1
_KIND_PCA = 2

# keeps local reachability densities finite when reach distances collapse to
# zero; coincident piles then score LOF = 1 (pure inlier) by construction
_LRD_EPS = 1e-10


@dataclass(frozen=True)
class ScoreVector:
    """Per-sample detector scores; higher = more in-distribution."""

    scores: np.ndarray
    detector_tag: str = ""

    def __post_init__(self):
        s = np.ascontiguousarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", s)
        if s.ndim != 1:
            raise ValueError("scores must be a 1-D sequence")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")

    def __len__(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class GaussianModel:
    means: np.ndarray        # (C, m) class centroids
    covariance: np.ndarray   # (m, m) pooled, ridge included
    ridge: float
    chol: np.ndarray         # lower-triangular factor of covariance

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray         # (m,)
    components: np.ndarray   # (p, m) orthonormal rows
    p: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


# ---------------------------------------------------------------------------
# logit baselines


def score_msp(l) -> ScoreVector:
    """Maximum softmax probability, computed with max-subtraction."""
    f = l.data
    shifted = f - f.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return ScoreVector(scores=probs.max(axis=1), detector_tag="msp")


def score_energy(l, T: float = 1.0) -> ScoreVector:
    """Negative free energy T * logsumexp(f / T); shift-equivariant in f."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    f = l.data / T
    m = f.max(axis=1)
    s = m + np.log(np.exp(f - m[:, None]).sum(axis=1))
    return ScoreVector(scores=T * s, detector_tag=f"energy_T{T:g}")


# ---------------------------------------------------------------------------
# Mahalanobis


def fit_gaussian(e: EmbeddingSet, ridge: float | None = None) -> GaussianModel:
    """Class means plus pooled within-class covariance (divided by n).

    ``ridge`` defaults to 1e-6 * trace(cov)/m and is added to the diagonal
    before factorization, so scoring is stable even for near-singular scatter.
    """
    if e.labels is None:
        raise ValueError("Gaussian fit needs labels")
    classes = np.unique(e.labels)
    m = e.dim
    means = np.empty((classes.size, m))
    scatter = np.zeros((m, m))
    for ci, c in enumerate(classes):
        rows = e.data[e.labels == c]
        if rows.shape[0] < 2:
            raise ValueError(f"class {c} has {rows.shape[0]} sample(s), need >= 2")
        mu = rows.mean(axis=0)
        means[ci] = mu
        centered = rows - mu
        scatter += centered.T @ centered
    cov = scatter / e.n
    if ridge is None:
        ridge = 1e-6 * np.trace(cov) / m
    cov = cov + ridge * np.eye(m)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(
            "pooled covariance is singular even after the ridge; "
            "increase ridge or check for constant features"
        ) from None
    return GaussianModel(means=means, covariance=cov, ridge=float(ridge), chol=chol)


def score_mahalanobis(g: GaussianModel, queries: EmbeddingSet) -> ScoreVector:
    """Negative minimum squared Mahalanobis distance over class centroids.

    Distances go through triangular solves against the stored factor.
    """
    if queries.dim != g.dim:
        raise ValueError(f"query dim {queries.dim} != model dim {g.dim}")
    q = queries.data
    best = np.full(q.shape[0], np.inf)
    for mu in g.means:
        y = solve_triangular(g.chol, (q - mu).T, lower=True)
        d2 = np.einsum("ij,ij->j", y, y)
        np.minimum(best, d2, out=best)
    return ScoreVector(scores=-best, detector_tag="mahalanobis")


# ---------------------------------------------------------------------------
# LOF


def _neighborhoods(points: np.ndarray, ref: np.ndarray, k: int,
                   exclude_self: bool, block: int = 256):
    """Per point: k-distance against ``ref`` and the tie-inclusive
    neighborhood {j : d(i, j) <= k-distance(i)} with its distances."""
    kdist = np.empty(points.shape[0])
    nbrs, nbr_d = [], []
    for s in range(0, points.shape[0], block):
        e = min(points.shape[0], s + block)
        d = points[s:e, None, :] - ref[None, :, :]
        dists = np.sqrt((d * d).sum(axis=2))
        if exclude_self:
            dists[np.arange(e - s), np.arange(s, e)] = np.inf
        part = np.partition(dists, k - 1, axis=1)[:, k - 1]
        kdist[s:e] = part
        for row, kd in zip(dists, part):
            nb = np.nonzero(row <= kd)[0]
            nbrs.append(nb)
            nbr_d.append(row[nb])
    return kdist, nbrs, nbr_d


def score_lof(idx, queries: EmbeddingSet, k: int = 50) -> ScoreVector:
    """Negated local outlier factor of each query against the indexed ID set.

    LOF near 1 marks an inlier, larger values mark outliers; the negation
    maps that onto the higher-is-ID convention. Neighborhoods include every
    point tied at the k-distance, per the original definition. Cost is
    quadratic in the index size.
    """
    V = idx.vectors
    n = V.shape[0]
    if not (1 <= k <= n - 1):
        raise ValueError(f"k={k} out of range [1, {n - 1}] for LOF on {n} rows")
    if queries.dim != V.shape[1]:
        raise ValueError(f"query dim {queries.dim} != index dim {V.shape[1]}")

    kdist, nbrs, nbr_d = _neighborhoods(V, V, k, exclude_self=True)
    lrd = np.empty(n)
    for i in range(n):
        reach = np.maximum(kdist[nbrs[i]], nbr_d[i])
        lrd[i] = 1.0 / (reach.mean() + _LRD_EPS)

    _, nbrs_q, nbr_dq = _neighborhoods(queries.data, V, k, exclude_self=False)
    lof = np.empty(queries.n)
    for i in range(queries.n):
        nb = nbrs_q[i]
        reach = np.maximum(kdist[nb], nbr_dq[i])
        lrd_q = 1.0 / (reach.mean() + _LRD_EPS)
        lof[i] = lrd[nb].mean() / lrd_q
    return ScoreVector(scores=-lof, detector_tag=f"lof_k{k}")


# ---------------------------------------------------------------------------
# PCA residual


def fit_pca(e: EmbeddingSet, p: int = 50) -> PcaModel:
    """Top-p principal directions of the centered sample covariance."""
    if not (1 <= p <= e.dim):
        raise ValueError(f"p={p} out of range [1, {e.dim}]")
    mean = e.data.mean(axis=0)
    centered = e.data - mean
    cov = centered.T @ centered / e.n
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, ::-1][:, :p].T  # rows = descending-eigenvalue directions
    return PcaModel(mean=mean, components=np.ascontiguousarray(components), p=int(p))


def score_pca(model: PcaModel, queries: EmbeddingSet) -> ScoreVector:
    """Negative squared reconstruction residual off the top-p subspace."""
    if queries.dim != model.dim:
        raise ValueError(f"query dim {queries.dim} != model dim {model.dim}")
    x = queries.data - model.mean
    proj = x @ model.components.T @ model.components
    resid = x - proj
    return ScoreVector(
        scores=-np.einsum("ij,ij->i", resid, resid), detector_tag=f"pca_p{model.p}"
    )


# ---------------------------------------------------------------------------
# model serialization: MDL1 container with EMB1 payload blocks


def save_model(model: GaussianModel | PcaModel, path: str) -> None:
    with open(path, "wb") as fh:
        if isinstance(model, GaussianModel):
            fh.write(MDL_MAGIC + struct.pack("<Id", _KIND_GAUSSIAN, model.ridge))
            fh.write(_write_emb1_bytes(model.means, None))
            fh.write(_write_emb1_bytes(model.covariance, None))
        elif isinstance(model, PcaModel):
            fh.write(MDL_MAGIC + struct.pack("<II", _KIND_PCA, model.p))
            fh.write(_write_emb1_bytes(model.mean[None, :], None))
            fh.write(_write_emb1_bytes(model.components, None))
        else:
            raise ValueError(f"cannot serialize model of type {type(model).__name__}")


def _split_emb1_blocks(raw: bytes, path: str, count: int):
    blocks = []
    off = 0
    for _ in range(count):
        if raw[off:off + 4] != b"EMB1":
            raise ValueError(f"{path}: expected EMB1 payload block")
        _, n, m = struct.unpack_from("<4sII", raw, off)
        size = 12 + 4 * n * m
        data, _ = _read_emb1_bytes(raw[off:off + size], path)
        blocks.append(data)
        off += size
    if raw[off:]:
        raise ValueError(f"{path}: trailing bytes after model payload")
    return blocks


def load_model(path: str) -> GaussianModel | PcaModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MDL_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MDL_MAGIC!r}")
    kind = struct.unpack_from("<I", raw, 4)[0]
    if kind == _KIND_GAUSSIAN:
        ridge = struct.unpack_from("<d", raw, 8)[0]
        means, cov = _split_emb1_blocks(raw[16:], path, 2)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError(f"{path}: stored covariance is not SPD") from None
        return GaussianModel(means=means, covariance=cov, ridge=ridge, chol=chol)
    if kind == _KIND_PCA:
        p = struct.unpack_from("<I", raw, 8)[0]
        mean, components = _split_emb1_blocks(raw[12:], path, 2)
        return PcaModel(mean=mean[0], components=components, p=p)
    raise ValueError(f"{path}: unknown model kind {kind}")
