"""Threshold calibration and detection metrics: FPR at fixed TPR, AUROC,
the k-selection sweep, and report serialization.

The calibrated threshold is the largest lambda that still accepts the target
fraction of ID scores (boundary counted as ID, matching the decision rule).
AUROC is the Mann-Whitney statistic with average ranks for ties, computed in
O(n log n); it equals the all-pairs enumeration exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .detectors import ScoreVector


def _scores(x) -> np.ndarray:
    s = x.scores if isinstance(x, ScoreVector) else np.asarray(x, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty score set")
    return s


@dataclass(frozen=True)
class OodSetMetrics:
    fpr95: float
    auroc: float
    n_ood: int


@dataclass(frozen=True)
class EvalReport:
    detector_tag: str
    threshold: float            # serialized under the key "lambda"
    tpr_at_threshold: float
    per_ood_set: dict[str, OodSetMetrics]
    n_id: int
    timing_ns_per_query: int = 0

    def __post_init__(self):
        if not self.per_ood_set:
            raise ValueError("report needs at least one OOD set")


@dataclass(frozen=True)
class SweepResult:
    grid: tuple[int, ...]
    metric_per_k: tuple[tuple[float, float], ...]  # (fpr95, auroc) per grid k
    chosen_k: int


def calibrate_lambda(id_scores, target_tpr: float = 0.95) -> float:
    """Largest lambda with fraction{score >= lambda} >= target_tpr."""
    s = np.sort(_scores(id_scores))
    if not (0 < target_tpr <= 1):
        raise ValueError(f"target_tpr must lie in (0, 1], got {target_tpr}")
    n = s.size
    # number of ID samples that must sit at or above lambda; the 1e-9 guard
    # keeps exact products like 0.95 * n from ceiling up a float ulp
    keep = math.ceil(target_tpr * n - 1e-9)
    return float(s[n - keep])


def fpr_at_tpr(id_scores, ood_scores, target_tpr: float = 0.95) -> float:
    """Fraction of OOD scores accepted at the ID-calibrated threshold."""
    lam = calibrate_lambda(id_scores, target_tpr)
    ood = _scores(ood_scores)
    return float(np.mean(ood >= lam))


def auroc(id_scores, ood_scores) -> float:
    """P(id > ood) + 0.5 P(id == ood) via average ranks."""
    i = _scores(id_scores)
    o = _scores(ood_scores)
    ranks = rankdata(np.concatenate([i, o]))
    u = ranks[: i.size].sum() - i.size * (i.size + 1) / 2.0
    return float(u / (i.size * o.size))


def evaluate(
    id_scores,
    ood_scores: dict,
    target_tpr: float = 0.95,
    detector_tag: str = "",
    timing_ns_per_query: int = 0,
) -> EvalReport:
    """Calibrate on ID scores and compute FPR/AUROC per OOD set."""
    ids = _scores(id_scores)
    lam = calibrate_lambda(ids, target_tpr)
    tpr = float(np.mean(ids >= lam))
    if not detector_tag and isinstance(id_scores, ScoreVector):
        detector_tag = id_scores.detector_tag
    per = {}
    for name, sc in ood_scores.items():
        o = _scores(sc)
        per[name] = OodSetMetrics(
            fpr95=float(np.mean(o >= lam)),
            auroc=auroc(ids, o),
            n_ood=o.size,
        )
    return EvalReport(
        detector_tag=detector_tag,
        threshold=lam,
        tpr_at_threshold=tpr,
        per_ood_set=per,
        n_id=ids.size,
        timing_ns_per_query=int(timing_ns_per_query),
    )


def sweep_k(
    idx,
    id_val,
    ood_val,
    grid,
    objective: str = "min_fpr95",
    variant: str = "kth",
    target_tpr: float = 0.95,
) -> SweepResult:
    """Evaluate the objective for every k in the grid; ties go to smaller k.

    Validation sets must be disjoint from any test data by caller contract.
    """
    from .knn import score_knn_multi

    if objective not in ("min_fpr95", "max_auroc"):
        raise ValueError(f"unknown objective {objective!r}")
    grid = [int(k) for k in grid]
    if not grid:
        raise ValueError("empty k grid")
    for k in grid:
        if not (1 <= k <= idx.n):
            raise ValueError(f"grid value k={k} out of range [1, {idx.n}]")
    id_sv = score_knn_multi(idx, id_val, grid, variant=variant)
    ood_sv = score_knn_multi(idx, ood_val, grid, variant=variant)
    metrics = []
    for k in grid:
        metrics.append(
            (
                fpr_at_tpr(id_sv[k], ood_sv[k], target_tpr),
                auroc(id_sv[k], ood_sv[k]),
            )
        )
    if objective == "min_fpr95":
        objvals = [m[0] for m in metrics]
        best = min(range(len(grid)), key=lambda i: (objvals[i], grid[i]))
    else:
        objvals = [m[1] for m in metrics]
        best = min(range(len(grid)), key=lambda i: (-objvals[i], grid[i]))
    return SweepResult(
        grid=tuple(grid), metric_per_k=tuple(metrics), chosen_k=grid[best]
    )


# ---------------------------------------------------------------------------
# serialization


def report_to_json(report: EvalReport) -> str:
    doc = {
        "detector_tag": report.detector_tag,
        "lambda": report.threshold,
        "tpr_at_lambda": report.tpr_at_threshold,
        "n_id": report.n_id,
        "timing_ns_per_query": report.timing_ns_per_query,
        "per_ood_set": {
            name: {"fpr95": m.fpr95, "auroc": m.auroc, "n_ood": m.n_ood}
            for name, m in report.per_ood_set.items()
        },
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def report_to_csv(report: EvalReport) -> str:
    lines = ["detector,ood_set,fpr95,auroc"]
    for name in sorted(report.per_ood_set):
        m = report.per_ood_set[name]
        lines.append(f"{report.detector_tag},{name},{m.fpr95:.17g},{m.auroc:.17g}")
    return "\n".join(lines) + "\n"


def sweep_to_csv(result: SweepResult) -> str:
    lines = ["k,fpr95,auroc,chosen"]
    for k, (fpr, auc) in zip(result.grid, result.metric_per_k):
        chosen = 1 if k == result.chosen_k else 0
        lines.append(f"{k},{fpr:.17g},{auc:.17g},{chosen}")
    return "\n".join(lines) + "\n"


def histogram_csv(scores, bins: int, lo: float | None = None,
                  hi: float | None = None) -> str:
    """Two-column histogram (bin_left, count) for external plotting."""
    s = _scores(scores)
    if bins < 1:
        raise ValueError("bins must be positive")
    lo = float(s.min()) if lo is None else lo
    hi = float(s.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(s, bins=bins, range=(lo, hi))
    lines = ["bin_left,count"]
    for left, c in zip(edges[:-1], counts):
        lines.append(f"{left:.17g},{int(c)}")
    return "\n".join(lines) + "\n"
