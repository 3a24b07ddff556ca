"""Shared benchmark constructions and independent oracles for the tests.

Oracles here deliberately avoid the library's fast paths: distances are
accumulated sequentially in pure Python, AUROC is the all-pairs enumeration,
FPR comes from a threshold scan, and LOF is a direct transcription of the
reachability-distance definition.
"""

from __future__ import annotations

import math

import numpy as np

import knnood as K


# ---------------------------------------------------------------------------
# benchmark specs


def standard_spec(n_id, n_ood, seed, kappa=50.0, n_classes=4, m=8, **kw):
    """Well-separated vMF classes with uniform-sphere OOD."""
    mus = K.spread_means(m, n_classes, seed=11)
    return K.SyntheticSpec(
        m=m,
        classes=tuple(K.VmfComponent(mu=tuple(mu), kappa=kappa) for mu in mus),
        epsilon=0.3,
        n_id=n_id,
        n_ood=n_ood,
        seed=seed,
        **kw,
    )


def disparity_spec(n_id, n_ood, seed, id_norm_range=(2.0, 20.0),
                   ood_norm_range=(0.5, 1.0), kappa=50.0):
    """Norm-disparity construction: raw ID norms spread wide, raw OOD norms
    small, directions overlapping (ID cones inside the OOD's uniform support)."""
    return standard_spec(
        n_id, n_ood, seed, kappa=kappa,
        norm_disparity=K.NormDisparity(
            id_norm_range=id_norm_range, ood_norm_range=ood_norm_range
        ),
    )


def curved_spec(n_id, n_ood, seed, angle_deg=120.0, kappa=60.0, m=8):
    """Two vMF lobes per class: a bimodal, curved class-conditional
    distribution that a single Gaussian per class fits badly."""
    base = K.spread_means(m, 2, seed=21)
    extra = K.spread_means(m, 4, seed=33)
    comps = []
    for ci, mu in enumerate(base):
        mu = np.asarray(mu)
        perp = np.asarray(extra[ci + 2])
        perp = perp - (perp @ mu) * mu
        perp /= np.linalg.norm(perp)
        a = math.radians(angle_deg) / 2
        for sign in (1.0, -1.0):
            lobe = math.cos(a) * mu + sign * math.sin(a) * perp
            comps.append(K.VmfComponent(mu=tuple(lobe), kappa=kappa, label=ci))
    return K.SyntheticSpec(
        m=m, classes=tuple(comps), epsilon=0.3, n_id=n_id, n_ood=n_ood,
        ood_kind="plateau_outside_id", plateau_quantile=0.9, seed=seed,
    )


# ---------------------------------------------------------------------------
# oracles


def knn_oracle(vectors, q, k):
    """Brute force in pure Python: sequential per-coordinate accumulation,
    full sort. Python floats are IEEE doubles, so the arithmetic order is
    the authoritative definition the fast path must reproduce bitwise."""
    rows = np.asarray(vectors, dtype=float).tolist()
    qv = np.asarray(q, dtype=float).tolist()
    sqrt = math.sqrt
    dists = []
    for row in rows:
        s = 0.0
        for a, b in zip(row, qv):
            t = a - b
            s += t * t
        dists.append(sqrt(s))
    dists.sort()
    return dists[k - 1], sum(dists[:k]) / k


def auroc_pairwise(id_scores, ood_scores):
    """All-pairs enumeration with ties worth one half."""
    i = np.asarray(id_scores)[:, None]
    o = np.asarray(ood_scores)[None, :]
    return float(((i > o).sum() + 0.5 * (i == o).sum()) / (i.size * o.size))


def fpr_scan_oracle(id_scores, ood_scores, target_tpr=0.95):
    """Scan every candidate threshold for the largest lambda meeting the
    coverage target, then count accepted OOD."""
    ids = np.asarray(id_scores)
    best = None
    for lam in np.unique(ids):
        if np.mean(ids >= lam) >= target_tpr - 1e-12:
            best = lam if best is None else max(best, lam)
    assert best is not None
    return float(np.mean(np.asarray(ood_scores) >= best))


def lof_oracle(index_points, queries, k):
    """Direct transcription of LOF with tie-inclusive neighborhoods."""
    X = np.asarray(index_points, dtype=float)
    n = len(X)

    def dist(a, b):
        return math.sqrt(((a - b) ** 2).sum())

    ref = np.array([[dist(X[i], X[j]) if i != j else math.inf
                     for j in range(n)] for i in range(n)])
    kdist = np.sort(ref, axis=1)[:, k - 1]
    nbrs = [np.nonzero(ref[i] <= kdist[i])[0] for i in range(n)]

    def lrd(point_dists, nb):
        reach = [max(kdist[j], point_dists[j]) for j in nb]
        return 1.0 / (sum(reach) / len(reach) + 1e-10)

    lrd_ref = np.array([lrd(ref[i], nbrs[i]) for i in range(n)])
    out = []
    for q in np.asarray(queries, dtype=float):
        dq = np.array([dist(q, X[j]) for j in range(n)])
        kd = np.sort(dq)[k - 1]
        nb = np.nonzero(dq <= kd)[0]
        lrd_q = lrd(dq, nb)
        out.append(float(np.mean(lrd_ref[nb]) / lrd_q))
    return np.array(out)
