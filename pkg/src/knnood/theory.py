"""Contamination-model analysis of the k-NN detector on the unit sphere.

The test distribution mixes an OOD fraction epsilon into ID. The local ID
density at a query is estimated from its k-th neighbor distance as
k / (c_b * n * r^(m-1)), the OOD density is a plateau that switches on
wherever the ID estimate falls below beta*eps*c0 / ((1-beta)*(1-eps)), and
the resulting empirical posterior thresholded at beta reproduces the
distance rule -r_k >= lambda for the closed-form lambda. The identity is
algebraic; the verifier checks both indicator chains agree sample by sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma

from .embed_io import EmbeddingSet


@dataclass(frozen=True)
class ContaminationSetup:
    epsilon: float   # OOD fraction of the test mixture
    beta: float      # posterior acceptance threshold
    c_b: float       # spherical-cap volume constant
    c0_hat: float    # OOD density plateau height
    m: int           # ambient dimension
    n: int           # ID sample count
    k: int

    def __post_init__(self):
        if not (0 < self.epsilon < 1):
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not (0 < self.beta < 1):
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.c_b > 0:
            raise ValueError(f"c_b must be positive, got {self.c_b}")
        if not self.c0_hat > 0:
            raise ValueError(f"c0_hat must be positive, got {self.c0_hat}")
        if self.m < 2:
            raise ValueError(f"dimension must be >= 2, got {self.m}")
        if not (1 <= self.k <= self.n):
            raise ValueError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")

    @property
    def plateau_threshold(self) -> float:
        """ID density level below which the OOD plateau turns on."""
        return (
            self.beta * self.epsilon * self.c0_hat
            / ((1 - self.beta) * (1 - self.epsilon))
        )


@dataclass(frozen=True)
class DensityEstimate:
    p_in_hat: float
    r_k: float
    k: int
    n: int


@dataclass(frozen=True)
class EquivalenceCheck:
    passed: bool
    n_checked: int
    counterexample: tuple[float, bool, bool] | None  # (r_k, distance side, posterior side)


def cap_volume_constant(m: int) -> float:
    """Small-radius volume constant of a spherical cap on S^(m-1): the
    (m-1)-ball volume coefficient, 2 for the circle, pi for S^2."""
    d = m - 1
    return math.pi ** (d / 2.0) / gamma(d / 2.0 + 1.0)


def sphere_surface_area(m: int) -> float:
    """Total surface measure of the unit sphere in R^m."""
    return 2.0 * math.pi ** (m / 2.0) / gamma(m / 2.0)


def estimate_density(setup: ContaminationSetup, r_k: float) -> DensityEstimate:
    """ID density per unit surface measure from one k-NN distance."""
    if not r_k > 0:
        raise ValueError(
            f"r_k must be positive, got {r_k}; a zero distance means a "
            "duplicated training point (density unbounded, posterior 1)"
        )
    p = setup.k / (setup.c_b * setup.n * r_k ** (setup.m - 1))
    return DensityEstimate(p_in_hat=p, r_k=float(r_k), k=setup.k, n=setup.n)


def posterior_id(setup: ContaminationSetup, p_in_hat: float) -> float:
    """Empirical probability that a sample with ID-density estimate
    ``p_in_hat`` is in-distribution, under the plateau OOD model.

    Accepts math.inf (the duplicated-training-point sentinel) and returns 1.
    """
    if p_in_hat < 0:
        raise ValueError(f"density estimate must be nonnegative, got {p_in_hat}")
    if math.isinf(p_in_hat):
        return 1.0
    p_out = setup.c0_hat if p_in_hat < setup.plateau_threshold else 0.0
    if p_out == 0.0:
        return 1.0
    w_in = (1 - setup.epsilon) * p_in_hat
    return w_in / (w_in + setup.epsilon * p_out)


def equivalence_lambda(setup: ContaminationSetup) -> float:
    """Closed-form threshold equating the distance rule with the posterior
    rule: -((1-beta)(1-eps)k / (beta eps c_b n c0))^(1/(m-1))."""
    num = (1 - setup.beta) * (1 - setup.epsilon) * setup.k
    den = setup.beta * setup.epsilon * setup.c_b * setup.n * setup.c0_hat
    return -((num / den) ** (1.0 / (setup.m - 1)))


def verify_decision_equivalence(
    setup: ContaminationSetup,
    r_k_samples,
    lambda_override: float | None = None,
) -> EquivalenceCheck:
    """Check 1{-r_k >= lambda} == 1{posterior >= beta} for every sample.

    ``lambda_override`` substitutes a foreign threshold on the distance side
    (negative-control experiments); the closed form is used otherwise.
    Returns the first counterexample on failure.
    """
    lam = equivalence_lambda(setup) if lambda_override is None else lambda_override
    checked = 0
    for r in np.asarray(r_k_samples, dtype=np.float64):
        r = float(r)
        left = (-r) >= lam
        right = posterior_id(setup, estimate_density(setup, r).p_in_hat) >= setup.beta
        checked += 1
        if left != right:
            return EquivalenceCheck(
                passed=False, n_checked=checked, counterexample=(r, left, right)
            )
    return EquivalenceCheck(passed=True, n_checked=checked, counterexample=None)


# ---------------------------------------------------------------------------
# convergence of the density estimator


def _evaluation_points(m: int, count: int, seed: int) -> np.ndarray:
    """Fixed probe locations, independent of the sample size under test."""
    if m == 2:
        angles = (np.arange(count) + 0.5) * (2 * math.pi / count)
        return np.column_stack([np.cos(angles), np.sin(angles)])
    rng = np.random.default_rng([seed, 0xE7A1])
    g = rng.standard_normal((count, m))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def convergence_experiment(
    m: int,
    n_grid,
    density_spec,
    seed: int = 0,
    k_rule=None,
    n_eval: int = 200,
    c_b: float | None = None,
) -> list[tuple[int, int, float]]:
    """Mean absolute error of the k-NN density estimate against the analytic
    density of ``density_spec`` (a synthetic mixture), per sample size.

    Returns rows (n, k, mean_abs_error). Evaluation points are fixed across
    the grid so the trend isolates estimator error.
    """
    from . import synthgen
    from .knn import build_index, score_knn

    if k_rule is None:
        k_rule = lambda n: math.ceil(math.sqrt(n))
    if c_b is None:
        c_b = cap_volume_constant(m)
    pts = _evaluation_points(m, n_eval, seed)
    truth = synthgen.mixture_density(density_spec, pts)
    probe = EmbeddingSet(data=pts, normalized=True, source_tag="eval-points")
    rows = []
    for gi, n in enumerate(n_grid):
        n = int(n)
        k = int(k_rule(n))
        sample = synthgen.sample_vmf_mixture(
            density_spec, n, np.random.default_rng([seed, 0x5A11, gi])
        )
        idx = build_index(
            EmbeddingSet(data=sample, normalized=True), alpha=1.0, base_k=k
        )
        r_k = -score_knn(idx, probe, k).scores
        est = k / (c_b * n * r_k ** (m - 1))
        rows.append((n, k, float(np.mean(np.abs(est - truth)))))
    return rows


def convergence_csv(rows) -> str:
    lines = ["n,k,mean_abs_error"]
    for n, k, err in rows:
        lines.append(f"{n},{k},{err:.17g}")
    return "\n".join(lines) + "\n"
