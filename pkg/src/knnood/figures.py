"""Matplotlib rendering for the report paths: score histograms, k-sweep
curves, and density-convergence trends, written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIGSIZE = (6.0, 3.8)


def render_score_hist(scores_by_set: dict[str, np.ndarray], bins: int,
                      out_png: str, title: str = "") -> None:
    """Overlaid score histograms, one series per sample set, shared bins."""
    lo = min(float(np.min(s)) for s in scores_by_set.values())
    hi = max(float(np.max(s)) for s in scores_by_set.values())
    if hi <= lo:
        hi = lo + 1.0
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    for name, s in scores_by_set.items():
        ax.hist(s, bins=bins, range=(lo, hi), density=True,
                histtype="stepfilled", alpha=0.45, label=name)
    ax.set_xlabel("detector score (higher = ID)")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def render_sweep(grid, fpr95s, aurocs, chosen_k: int, out_png: str) -> None:
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.plot(grid, [100 * f for f in fpr95s], "o-", label="FPR95 (%)")
    ax.plot(grid, [100 * a for a in aurocs], "s--", label="AUROC (%)")
    ax.axvline(chosen_k, color="gray", lw=0.8, ls=":", label=f"chosen k={chosen_k}")
    ax.set_xscale("log")
    ax.set_xlabel("k")
    ax.set_ylabel("percent")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def render_convergence(rows, out_png: str) -> None:
    ns = [r[0] for r in rows]
    errs = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.loglog(ns, errs, "o-")
    ax.set_xlabel("ID sample count n")
    ax.set_ylabel("mean |density error|")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
