"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and timings.
"""

import math
import subprocess
import sys
import time

import numpy as np

import knnood as K
from knnood.embed_io import EmbeddingSet, normalize
from knnood.theory import ContaminationSetup, equivalence_lambda, verify_decision_equivalence

from helpers import (
    auroc_pairwise,
    curved_spec,
    disparity_spec,
    fpr_scan_oracle,
    knn_oracle,
    standard_spec,
)


def _report(num, ok, detail, t0, budget=None):
    elapsed = time.perf_counter() - t0
    status = "PASS" if ok else "FAIL"
    print(f"[criterion {num:2d}] {status} ({elapsed:5.1f}s)  {detail}")
    assert ok, f"criterion {num}: {detail}"
    if budget is not None:
        assert elapsed < budget, f"criterion {num}: {elapsed:.1f}s over {budget}s budget"


def test_criterion_01_knn_exactness():
    """query_knn equals the brute-force oracle bitwise on 200 instances."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    mismatches = 0
    for i in range(200):
        m = (2, 8, 32)[i % 3]
        k = (1, 5, 50)[(i // 3) % 3]
        n = int(rng.integers(max(k + 1, 60), 2001))
        vecs = rng.standard_normal((n, m))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        idx = K.build_index(
            EmbeddingSet(data=vecs, normalized=True), alpha=1.0, base_k=k
        )
        q = rng.standard_normal(m)
        q /= np.linalg.norm(q)
        res = K.query_knn(idx, q, k)
        ork, oravg = knn_oracle(vecs, q, k)
        if res.r_k != ork or res.r_avg != oravg:
            mismatches += 1
    _report(1, mismatches == 0,
            f"200 instances, {mismatches} bitwise mismatches", t0, budget=10)


def test_criterion_02_metric_oracles():
    """Rank AUROC vs pairwise enumeration; FPR95 vs threshold scan."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_gap = 0.0
    for i in range(100):
        if i < 5:
            n1 = n2 = 10**4  # full-size instances
        else:
            n1 = int(np.exp(rng.uniform(math.log(10), math.log(1e4))))
            n2 = int(np.exp(rng.uniform(math.log(10), math.log(1e4))))
        if i % 2:  # integer grids force ties
            ids = rng.integers(0, 50, size=n1).astype(float)
            ood = rng.integers(0, 50, size=n2).astype(float)
        else:
            ids = rng.standard_normal(n1)
            ood = rng.standard_normal(n2)
        gap = abs(K.auroc(ids, ood) - auroc_pairwise(ids, ood))
        worst_gap = max(worst_gap, gap)
    fpr_exact = all(
        K.fpr_at_tpr(ids, ood, 0.95) == fpr_scan_oracle(ids, ood, 0.95)
        for ids, ood in (
            (rng.choice(np.arange(25.0), size=rng.integers(5, 400)),
             rng.choice(np.arange(25.0), size=rng.integers(5, 400)))
            for _ in range(100)
        )
    )
    ok = worst_gap <= 1e-12 and fpr_exact
    _report(2, ok, f"AUROC worst |rank-pairwise| = {worst_gap:.2e}, "
            f"FPR95 scan-exact = {fpr_exact}", t0, budget=30)


def test_criterion_03_decision_equivalence():
    """Indicator identity across >= 20 random setups, >= 1e5 samples total;
    the perturbed-threshold control must fail."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    grid = np.arange(0.1, 0.91, 0.1)
    setups = 0
    total = 0
    controls_failed = 0
    while setups < 24:
        setup = ContaminationSetup(
            epsilon=float(rng.choice(grid)),
            beta=float(rng.choice(grid)),
            c_b=float(rng.uniform(0.5, 4 * math.pi)),
            c0_hat=float(rng.uniform(0.1, 10.0)),
            m=int(rng.choice([3, 8])),
            n=int(rng.integers(100, 10**6)),
            k=int(rng.integers(1, 100)),
        )
        lam = equivalence_lambda(setup)
        if not (1e-5 < -lam < 1.9):
            continue
        setups += 1
        r = np.exp(rng.uniform(math.log(1e-6), math.log(2.0), size=4500))
        r = np.concatenate([r, [-lam - 5e-7, -lam + 5e-7]])
        check = verify_decision_equivalence(setup, r)
        assert check.passed, f"identity failed: {check.counterexample}"
        total += check.n_checked
        bad = verify_decision_equivalence(setup, r, lambda_override=lam + 1e-6)
        controls_failed += int(not bad.passed)
    ok = total >= 10**5 and controls_failed == setups
    _report(3, ok, f"{setups} setups, {total} samples, 0 identity failures, "
            f"{controls_failed}/{setups} negative controls failed", t0, budget=10)


def test_criterion_04_density_convergence():
    """Density-estimate error strictly decreases on uniform S1 and lands
    within 10 percent of 1/(2 pi)."""
    t0 = time.perf_counter()
    spec = K.SyntheticSpec(
        m=2, classes=(K.VmfComponent(mu=(1.0, 0.0), kappa=0.0),),
        epsilon=0.5, n_id=1, n_ood=1, seed=0,
    )
    truth = 1 / (2 * math.pi)
    details = []
    ok = True
    for seed in (0, 1, 2):
        rows = K.convergence_experiment(2, [10**3, 10**4, 10**5], spec, seed=seed)
        errs = [r[2] for r in rows]
        dec = all(b < a for a, b in zip(errs, errs[1:]))
        final_rel = errs[-1] / truth
        ok = ok and dec and final_rel < 0.10
        details.append(f"seed {seed}: errors {[f'{e:.2e}' for e in errs]} "
                       f"final {100 * final_rel:.1f}%")
    _report(4, ok, "; ".join(details), t0, budget=60)


def test_criterion_05_normalization_ablation():
    """Normalized kNN beats raw-feature kNN by >= 20 FPR95 points on the
    norm-disparity benchmark."""
    t0 = time.perf_counter()
    k = 10
    gaps = []
    for seed in (0, 1):
        b = K.make_benchmark(disparity_spec(8000, 2000, seed=seed))
        idx_n = K.build_index(b.id_train, alpha=1.0, base_k=k)
        fpr_norm = K.fpr_at_tpr(
            K.score_knn(idx_n, b.id_test, k), K.score_knn(idx_n, b.ood_test, k)
        )
        idx_r = K.build_index(
            b.raw_id_train, alpha=1.0, base_k=k, unit_check=False
        )
        fpr_raw = K.fpr_at_tpr(
            K.score_knn(idx_r, b.raw_id_test, k),
            K.score_knn(idx_r, b.raw_ood_test, k),
        )
        gaps.append(100 * (fpr_raw - fpr_norm))
    ok = all(g >= 20.0 for g in gaps)
    _report(5, ok, f"raw-minus-normalized FPR95 gaps: "
            f"{', '.join(f'{g:.1f}pp' for g in gaps)} (need >= 20)", t0)


def test_criterion_06_subsampling_stability():
    """FPR95 at alpha 0.1 (k scaled to 100) within 5 points of the full
    index at k=1000, for 3 seeds of the standard benchmark."""
    t0 = time.perf_counter()
    diffs = []
    for seed in (0, 1, 2):
        b = K.make_benchmark(standard_spec(100000, 4000, seed=seed))
        fps = {}
        for alpha in (1.0, 0.1):
            idx = K.build_index(b.id_train, alpha=alpha, base_k=1000, seed=seed)
            assert idx.effective_k == (1000 if alpha == 1.0 else 100)
            fps[alpha] = K.fpr_at_tpr(
                K.score_knn(idx, b.id_test, idx.effective_k),
                K.score_knn(idx, b.ood_test, idx.effective_k),
            )
        diffs.append(100 * abs(fps[1.0] - fps[0.1]))
    ok = all(d <= 5.0 for d in diffs)
    _report(6, ok, f"|FPR95 full - subsampled| per seed: "
            f"{', '.join(f'{d:.2f}pp' for d in diffs)} (allow 5pp)", t0, budget=120)


def test_criterion_07_non_gaussian_advantage():
    """kNN AUROC >= Mahalanobis AUROC on the curved two-lobe manifold."""
    t0 = time.perf_counter()
    k = 10
    rows = []
    ok = True
    for seed in (0, 1, 2):
        b = K.make_benchmark(curved_spec(8000, 2000, seed=seed))
        idx = K.build_index(b.id_train, alpha=1.0, base_k=k)
        a_knn = K.auroc(
            K.score_knn(idx, b.id_test, k), K.score_knn(idx, b.ood_test, k)
        )
        g = K.fit_gaussian(b.id_train)
        a_mah = K.auroc(
            K.score_mahalanobis(g, b.id_test), K.score_mahalanobis(g, b.ood_test)
        )
        ok = ok and a_knn >= a_mah
        rows.append(f"seed {seed}: knn {a_knn:.4f} vs maha {a_mah:.4f}")
    _report(7, ok, "; ".join(rows), t0)


def test_criterion_08_kth_vs_kavg_parity():
    """Best-swept kth and kavg variants land within 3 FPR95 points."""
    t0 = time.perf_counter()
    b = K.make_benchmark(standard_spec(20000, 3000, seed=0))
    ood_val = K.sample_ood(standard_spec(20000, 3000, seed=1000))
    half = b.id_test.n // 2
    id_val = EmbeddingSet(data=b.id_test.data[:half], normalized=True)
    id_test = EmbeddingSet(data=b.id_test.data[half:], normalized=True)
    idx = K.build_index(b.id_train, alpha=1.0, base_k=50)
    grid = [1, 10, 20, 50, 100, 200, 500, 1000]
    fpr = {}
    chosen = {}
    for variant in ("kth", "kavg"):
        sw = K.sweep_k(idx, id_val, ood_val, grid, variant=variant)
        chosen[variant] = sw.chosen_k
        fpr[variant] = K.fpr_at_tpr(
            K.score_knn(idx, id_test, sw.chosen_k, variant=variant),
            K.score_knn(idx, b.ood_test, sw.chosen_k, variant=variant),
        )
    diff = 100 * abs(fpr["kth"] - fpr["kavg"])
    _report(8, diff <= 3.0,
            f"kth (k={chosen['kth']}) FPR95 {100 * fpr['kth']:.2f}% vs "
            f"kavg (k={chosen['kavg']}) {100 * fpr['kavg']:.2f}%, "
            f"diff {diff:.2f}pp (allow 3pp)", t0)


def test_criterion_09_pipeline_determinism(tmp_path):
    """synth -> index -> score -> calibrate -> eval twice: byte-identical."""
    t0 = time.perf_counter()
    spec = ('{"m": 6, "classes": {"count": 3, "kappa": 35.0}, "epsilon": 0.3,'
            ' "n_id": 1500, "n_ood": 400, "seed": 17}')
    (tmp_path / "spec.json").write_text(spec)

    def run_pipeline(workdir):
        workdir.mkdir()
        def cli(*args):
            r = subprocess.run(
                [sys.executable, "-m", "knnood.cli", *args],
                capture_output=True, text=True, cwd=workdir,
            )
            assert r.returncode == 0, r.stderr
        cli("synth", "--spec", "../spec.json", "--out-dir", "data")
        cli("index", "--input", "data/id_train.emb", "--alpha", "0.5",
            "--k", "20", "--seed", "3", "--out", "idx.knn1")
        cli("score", "--detector", "knn", "--input", "data/id_test.emb",
            "--index", "idx.knn1", "--out", "id.scores")
        cli("score", "--detector", "knn", "--input", "data/ood_test.emb",
            "--index", "idx.knn1", "--out", "ood.scores")
        cli("calibrate", "--scores", "id.scores", "--out", "lambda.txt")
        cli("eval", "--id-scores", "id.scores", "--ood", "unif=ood.scores",
            "--out", "report.json", "--hist", "24")
        return sorted(p for p in workdir.rglob("*") if p.is_file())

    files1 = run_pipeline(tmp_path / "run1")
    files2 = run_pipeline(tmp_path / "run2")
    names1 = [p.relative_to(tmp_path / "run1") for p in files1]
    names2 = [p.relative_to(tmp_path / "run2") for p in files2]
    ok = names1 == names2 and all(
        a.read_bytes() == b.read_bytes() for a, b in zip(files1, files2)
    )
    _report(9, ok, f"{len(files1)} output files byte-identical "
            f"(incl. report, histograms, figure)", t0)


def test_criterion_10_baseline_unit_contracts():
    """Every tagged operation-table example for the baselines."""
    t0 = time.perf_counter()
    from knnood.detectors import GaussianModel
    from knnood.embed_io import LogitSet

    checks = []

    # MSP
    msp = K.score_msp(LogitSet(data=np.array([[0.0, 0.0, 0.0, 0.0]]))).scores[0]
    checks.append(abs(msp - 0.25) < 1e-15)
    msp2 = K.score_msp(LogitSet(data=np.array([[10.0, -10.0]]))).scores[0]
    checks.append(abs(msp2 - 1.0) < 1e-8)
    f = np.array([[1.0, -2.0, 0.5]])
    checks.append(np.allclose(
        K.score_msp(LogitSet(data=f)).scores,
        K.score_msp(LogitSet(data=f + 100.0)).scores, atol=1e-12,
    ))

    # Energy
    checks.append(abs(
        K.score_energy(LogitSet(data=np.array([[0.0, 0.0]]))).scores[0]
        - math.log(2)) < 1e-14)
    checks.append(abs(
        K.score_energy(LogitSet(data=np.array([[5.0, 0.0, 0.0]]))).scores[0]
        - math.log(math.exp(5) + 2)) < 1e-12)
    try:
        LogitSet(data=np.array([[3.0]]))
        checks.append(False)
    except ValueError:
        checks.append(True)

    # Mahalanobis examples and the factorization-vs-inverse agreement
    rng = np.random.default_rng(10)
    data = [[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]]
    g = K.fit_gaussian(
        EmbeddingSet(data=np.array(data), labels=np.array([0, 0, 1, 1])),
        ridge=1e-6,
    )
    checks.append(np.allclose(g.covariance, 1e-6 * np.eye(2)))
    gm = GaussianModel(means=np.zeros((1, 2)), covariance=np.eye(2),
                       ridge=0.0, chol=np.eye(2))
    checks.append(abs(K.score_mahalanobis(
        gm, EmbeddingSet(data=np.array([[1.0, 0.0]]))).scores[0] + 1.0) < 1e-12)
    checks.append(abs(K.score_mahalanobis(
        gm, EmbeddingSet(data=np.array([[0.0, 0.0]]))).scores[0]) < 1e-12)
    cov2 = np.diag([4.0, 1.0])
    gm2 = GaussianModel(means=np.zeros((1, 2)), covariance=cov2,
                        ridge=0.0, chol=np.linalg.cholesky(cov2))
    checks.append(abs(K.score_mahalanobis(
        gm2, EmbeddingSet(data=np.array([[2.0, 0.0]]))).scores[0] + 1.0) < 1e-12)
    agree = True
    for m in (8, 32):
        a = rng.standard_normal((m, m))
        cov = a @ a.T + 0.5 * np.eye(m)
        assert np.linalg.cond(cov) < 1e6
        means = rng.standard_normal((4, m))
        gmr = GaussianModel(means=means, covariance=cov, ridge=0.0,
                            chol=np.linalg.cholesky(cov))
        q = rng.standard_normal((500, m))
        got = K.score_mahalanobis(gmr, EmbeddingSet(data=q)).scores
        inv = np.linalg.inv(cov)
        want = np.array(
            [-min((x - mu) @ inv @ (x - mu) for mu in means) for x in q]
        )
        agree = agree and np.allclose(got, want, rtol=1e-8)
    checks.append(agree)

    # LOF lattice, far query, degenerate pile
    side = 14
    xs, ys = np.meshgrid(np.arange(side, dtype=float),
                         np.arange(side, dtype=float))
    lattice = np.column_stack([xs.ravel(), ys.ravel()])
    idx = K.build_index(EmbeddingSet(data=lattice), alpha=1.0, base_k=1,
                        unit_check=False)
    interior = lattice[
        (lattice[:, 0] >= 4) & (lattice[:, 0] < 10)
        & (lattice[:, 1] >= 4) & (lattice[:, 1] < 10)
    ][:20]
    s = K.score_lof(idx, EmbeddingSet(data=interior), k=8).scores
    checks.append(np.all(np.abs(s + 1.0) <= 0.05))
    checks.append(K.score_lof(
        idx, EmbeddingSet(data=np.array([[300.0, 300.0]])), k=8).scores[0] < -1.0)
    pile = K.build_index(EmbeddingSet(data=np.zeros((10, 2))), alpha=1.0,
                         base_k=1, unit_check=False)
    checks.append(abs(K.score_lof(
        pile, EmbeddingSet(data=np.zeros((1, 2))), k=3).scores[0] + 1.0) < 1e-9)

    # PCA
    xs = np.linspace(-2, 2, 12)
    model = K.fit_pca(
        EmbeddingSet(data=np.column_stack([xs, np.zeros(12)])), p=1
    )
    checks.append(abs(K.score_pca(
        model, EmbeddingSet(data=np.array([[1.3, 0.0]]))).scores[0]) < 1e-12)
    checks.append(abs(K.score_pca(
        model, EmbeddingSet(data=np.array([[0.0, 1.0]]))).scores[0] + 1.0) < 1e-12)
    full = K.fit_pca(EmbeddingSet(data=rng.standard_normal((30, 3))), p=3)
    checks.append(np.allclose(K.score_pca(
        full, EmbeddingSet(data=rng.standard_normal((8, 3)))).scores, 0, atol=1e-12))

    ok = all(checks)
    _report(10, ok, f"{sum(checks)}/{len(checks)} tagged examples hold", t0)
