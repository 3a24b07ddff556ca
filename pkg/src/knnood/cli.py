"""Command-line pipeline: convert, synth, index, score, calibrate, eval,
sweep, theory. Outputs are written atomically (temp file, then rename) and
are byte-identical for identical inputs and seeds.

Per-query scoring time is measured around the scoring loop only and printed
to stderr; it never enters output files, which must stay deterministic.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

import numpy as np

from . import detectors, embed_io, evalkit, figures, knn, synthgen, theory

_K_GRID_DEFAULT = "1,10,20,50,100,200,500,1000,3000,5000"


def _atomic_write(path: str, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    tmp = path + ".tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_save(path: str, save_fn) -> None:
    tmp = path + ".tmp"
    save_fn(tmp)
    os.replace(tmp, path)


def _load_scores(path: str) -> np.ndarray:
    vals = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(float(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a score: {line!r}") from None
    if not vals:
        raise ValueError(f"{path}: no scores")
    return np.asarray(vals, dtype=np.float64)


def _scores_text(scores: np.ndarray) -> str:
    return "".join("%.17g\n" % v for v in scores)


def _maybe_clamp(e, args, calib_defaults_to_input: bool):
    if args.react_percentile is None and args.react_threshold is None:
        return e
    spec = embed_io.ClampSpec(
        threshold=args.react_threshold, percentile=args.react_percentile
    )
    if args.react_calib:
        calib = embed_io.load_embeddings(args.react_calib, format="binary")
    elif calib_defaults_to_input:
        calib = e
    elif spec.percentile is not None:
        raise ValueError(
            "--react-percentile on queries needs --react-calib with raw ID "
            "activations; the clamp level must not come from the queries"
        )
    else:
        calib = None
    return embed_io.clamp_react(e, spec, calib)


def _add_react_flags(p):
    p.add_argument("--react-percentile", type=float, default=None,
                   help="clamp activations at this percentile of the calibration set")
    p.add_argument("--react-threshold", type=float, default=None,
                   help="clamp activations at an explicit cap")
    p.add_argument("--react-calib", default=None,
                   help="EMB1 file of raw ID activations the percentile is taken from "
                        "(defaults to the input itself)")


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args) -> int:
    e = embed_io.load_embeddings(args.input, format="csv",
                                 label_column=args.labels)
    _atomic_save(args.out, lambda p: embed_io.save_embeddings(e, p, "binary"))
    print(f"wrote {args.out} ({e.n}x{e.dim}"
          f"{', labeled' if e.labels is not None else ''})")
    return 0


def cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = synthgen.spec_from_manifest(fh.read())
    bench = synthgen.make_benchmark(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    out = {}

    def emit(name, eset):
        path = os.path.join(args.out_dir, name + ".emb")
        _atomic_save(path, lambda p: embed_io.save_embeddings(eset, p, "binary"))
        out[name] = path

    emit("id_train", bench.id_train)
    emit("id_test", bench.id_test)
    emit("ood_test", bench.ood_test)
    if bench.raw_id_train is not None:
        emit("raw_id_train", bench.raw_id_train)
        emit("raw_id_test", bench.raw_id_test)
        emit("raw_ood_test", bench.raw_ood_test)
    if bench.id_test_logits is not None:
        for name, lg in (("id_test_logits", bench.id_test_logits),
                         ("ood_test_logits", bench.ood_test_logits)):
            path = os.path.join(args.out_dir, name + ".emb")
            _atomic_save(path, lambda p, lg=lg: embed_io.save_logits(lg, p, "binary"))
            out[name] = path
    _atomic_write(os.path.join(args.out_dir, "manifest.json"),
                  synthgen.spec_to_manifest(spec))
    for name, path in out.items():
        print(f"wrote {path}")
    return 0


def cmd_index(args) -> int:
    e = embed_io.load_embeddings(args.input, format="binary")
    e = _maybe_clamp(e, args, calib_defaults_to_input=True)
    if not args.raw:
        e = embed_io.normalize(e)
    idx = knn.build_index(e, alpha=args.alpha, base_k=args.k, seed=args.seed,
                          unit_check=not args.raw)
    _atomic_save(args.out, lambda p: knn.save_index(idx, p))
    print(f"wrote {args.out} (n'={idx.n}, effective_k={idx.effective_k})")
    return 0


def cmd_score(args) -> int:
    det = args.detector
    queries_path = args.input
    if det in ("knn", "knn_avg", "lof"):
        if not args.index:
            raise ValueError(f"--detector {det} needs --index")
        idx = knn.load_index(args.index, unit=not args.raw)
        q = embed_io.load_embeddings(queries_path, format="binary")
        q = _maybe_clamp(q, args, calib_defaults_to_input=False)
        if not args.raw:
            q = embed_io.normalize(q)
        if args.k is not None:
            k = args.k
        else:
            k = 50 if det == "lof" else idx.effective_k
        t0 = time.perf_counter_ns()
        if det == "lof":
            sv = detectors.score_lof(idx, q, k=k)
        else:
            variant = "kth" if det == "knn" else "kavg"
            sv = knn.score_knn(idx, q, k=k, variant=variant)
        elapsed = time.perf_counter_ns() - t0
    elif det in ("maha", "pca"):
        if not args.train:
            raise ValueError(f"--detector {det} needs --train")
        train = embed_io.load_embeddings(args.train, format="binary")
        q = embed_io.load_embeddings(queries_path, format="binary")
        if args.normalize_features:
            train, q = embed_io.normalize(train), embed_io.normalize(q)
        if det == "maha":
            model = detectors.fit_gaussian(train)
            t0 = time.perf_counter_ns()
            sv = detectors.score_mahalanobis(model, q)
        else:
            model = detectors.fit_pca(train, p=args.p)
            t0 = time.perf_counter_ns()
            sv = detectors.score_pca(model, q)
        elapsed = time.perf_counter_ns() - t0
        if args.model_out:
            _atomic_save(args.model_out, lambda p: detectors.save_model(model, p))
    elif det in ("msp", "energy"):
        logits = embed_io.load_logits(queries_path, format="binary")
        t0 = time.perf_counter_ns()
        sv = (detectors.score_msp(logits) if det == "msp"
              else detectors.score_energy(logits, T=args.temperature))
        elapsed = time.perf_counter_ns() - t0
    else:
        raise ValueError(f"unknown detector {det!r}")
    _atomic_write(args.out, _scores_text(sv.scores))
    per_query = elapsed // max(len(sv), 1)
    print(f"timing_ns_per_query={per_query}", file=sys.stderr)
    print(f"wrote {args.out} ({len(sv)} scores, {sv.detector_tag})")
    return 0


def cmd_calibrate(args) -> int:
    lam = evalkit.calibrate_lambda(_load_scores(args.scores), target_tpr=args.tpr)
    if args.out:
        _atomic_write(args.out, "%.17g\n" % lam)
    print("%.17g" % lam)
    return 0


def cmd_eval(args) -> int:
    id_scores = _load_scores(args.id_scores)
    ood = {}
    for item in args.ood:
        name, _, path = item.partition("=")
        if not path:
            name, path = os.path.splitext(os.path.basename(item))[0], item
        ood[name] = _load_scores(path)
    report = evalkit.evaluate(
        id_scores, ood, target_tpr=args.tpr,
        detector_tag=args.detector_tag,
        timing_ns_per_query=args.timing_ns,
    )
    text = evalkit.report_to_csv(report) if args.csv else evalkit.report_to_json(report)
    _atomic_write(args.out, text)
    print(f"wrote {args.out}")
    if args.hist:
        stem = os.path.splitext(args.out)[0]
        sets = {"id": id_scores, **ood}
        lo = min(float(s.min()) for s in sets.values())
        hi = max(float(s.max()) for s in sets.values())
        for name, s in sets.items():
            path = f"{stem}.hist.{name}.csv"
            _atomic_write(path, evalkit.histogram_csv(s, args.hist, lo, hi))
            print(f"wrote {path}")
        if not args.no_fig:
            png = f"{stem}.hist.png"
            figures.render_score_hist(sets, args.hist, png,
                                      title=report.detector_tag)
            print(f"wrote {png}")
    return 0


def cmd_sweep(args) -> int:
    idx = knn.load_index(args.index)
    id_val = embed_io.normalize(embed_io.load_embeddings(args.id_val, "binary"))
    ood_val = embed_io.normalize(embed_io.load_embeddings(args.ood_val, "binary"))
    grid = sorted({int(k) for k in args.grid.split(",")})
    grid = [k for k in grid if k <= idx.n] or [min(grid)]
    result = evalkit.sweep_k(
        idx, id_val, ood_val, grid,
        objective=args.objective, variant=args.variant, target_tpr=args.tpr,
    )
    _atomic_write(args.out, evalkit.sweep_to_csv(result))
    print(f"wrote {args.out} (chosen_k={result.chosen_k})")
    if not args.no_fig:
        png = os.path.splitext(args.out)[0] + ".png"
        figures.render_sweep(
            result.grid, [m[0] for m in result.metric_per_k],
            [m[1] for m in result.metric_per_k], result.chosen_k, png,
        )
        print(f"wrote {png}")
    return 0


def cmd_theory(args) -> int:
    if args.mode == "verify":
        setup = theory.ContaminationSetup(
            epsilon=args.eps, beta=args.beta, c_b=args.cb, c0_hat=args.c0,
            m=args.m, n=args.n, k=args.k,
        )
        lam = theory.equivalence_lambda(setup)
        rng = np.random.default_rng(args.seed)
        r = np.exp(rng.uniform(math.log(1e-6), math.log(2.0), size=args.samples))
        # probe both sides of the decision boundary explicitly
        r = np.concatenate([r, [-lam - 5e-7, -lam + 5e-7]])
        override = None if args.lambda_shift == 0.0 else lam + args.lambda_shift
        check = theory.verify_decision_equivalence(setup, r, lambda_override=override)
        if check.passed:
            print(f"PASS ({check.n_checked} samples, lambda={lam:.9g})")
            return 0
        cr, left, right = check.counterexample
        print(f"FAIL at r_k={cr!r}: distance side {left}, posterior side {right}")
        return 1
    # converge
    spec = synthgen.SyntheticSpec(
        m=args.m,
        classes=(synthgen.VmfComponent(
            mu=tuple([1.0] + [0.0] * (args.m - 1)), kappa=args.kappa),),
        epsilon=0.5, n_id=1, n_ood=1, seed=args.seed,
    )
    rows = theory.convergence_experiment(
        args.m, [int(v) for v in args.n_grid.split(",")], spec, seed=args.seed,
    )
    _atomic_write(args.out, theory.convergence_csv(rows))
    print(f"wrote {args.out}")
    if not args.no_fig:
        png = os.path.splitext(args.out)[0] + ".png"
        figures.render_convergence(rows, png)
        print(f"wrote {png}")
    errs = [r[2] for r in rows]
    trend = "decreasing" if all(b < a for a, b in zip(errs, errs[1:])) else "not monotone"
    print(f"mean_abs_error trend: {trend}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="knnood",
        description="k-NN out-of-distribution detection pipeline",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="CSV to EMB1 binary")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="store_true",
                   help="treat the last CSV column as integer labels")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("synth", help="generate a benchmark from a spec manifest")
    p.add_argument("--spec", required=True, help="JSON manifest path")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("index", help="build a KNN1 snapshot from embeddings")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--k", type=int, default=50, help="base k before alpha scaling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true",
                   help="skip normalization (ablation only)")
    _add_react_flags(p)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("score", help="score queries with a detector")
    p.add_argument("--detector", required=True,
                   choices=["knn", "knn_avg", "maha", "msp", "energy", "lof", "pca"])
    p.add_argument("--input", required=True,
                   help="queries (EMB1 embeddings, or logits for msp/energy)")
    p.add_argument("--out", required=True)
    p.add_argument("--index", help="KNN1 snapshot (knn, knn_avg, lof)")
    p.add_argument("--train", help="labeled EMB1 training set (maha, pca)")
    p.add_argument("--k", type=int, default=None,
                   help="neighbor count; defaults to the snapshot's effective k")
    p.add_argument("--p", type=int, default=50, help="PCA component count")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--raw", action="store_true",
                   help="score raw features on a raw index (ablation only)")
    p.add_argument("--normalize-features", action="store_true",
                   help="normalize features before maha/pca for controlled comparisons")
    p.add_argument("--model-out", help="also save the fitted maha/pca model (MDL1)")
    _add_react_flags(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("calibrate", help="ID-coverage threshold from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--tpr", type=float, default=0.95)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("eval", help="FPR95/AUROC report from score files")
    p.add_argument("--id-scores", required=True)
    p.add_argument("--ood", action="append", required=True,
                   metavar="NAME=PATH", help="repeatable OOD score file")
    p.add_argument("--out", required=True)
    p.add_argument("--tpr", type=float, default=0.95)
    p.add_argument("--csv", action="store_true", help="CSV rows instead of JSON")
    p.add_argument("--hist", type=int, default=0, metavar="BINS",
                   help="also write score histograms (CSV + figure)")
    p.add_argument("--no-fig", action="store_true")
    p.add_argument("--detector-tag", default="")
    p.add_argument("--timing-ns", type=int, default=0,
                   help="per-query timing measured by `score`, for the report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="select k over a grid on validation data")
    p.add_argument("--index", required=True)
    p.add_argument("--id-val", required=True)
    p.add_argument("--ood-val", required=True)
    p.add_argument("--grid", default=_K_GRID_DEFAULT)
    p.add_argument("--objective", choices=["min_fpr95", "max_auroc"],
                   default="min_fpr95")
    p.add_argument("--variant", choices=["kth", "kavg"], default="kth")
    p.add_argument("--tpr", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.add_argument("--no-fig", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("theory", help="identity verifier / convergence experiment")
    p.add_argument("mode", choices=["verify", "converge"])
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--cb", type=float, default=2 * math.pi)
    p.add_argument("--c0", type=float, default=1.0)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-shift", type=float, default=0.0,
                   help="perturb the closed-form threshold (negative control)")
    p.add_argument("--kappa", type=float, default=0.0,
                   help="vMF concentration for the convergence density")
    p.add_argument("--n-grid", default="1000,10000,100000")
    p.add_argument("--out", default="convergence.csv")
    p.add_argument("--no-fig", action="store_true")
    p.set_defaults(fn=cmd_theory)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
