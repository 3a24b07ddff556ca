"""Synthetic benchmarks with known ground truth on the unit sphere.

ID data is an equal-weight von Mises-Fisher mixture (closed-form density,
which the theory experiments require). OOD is either uniform on the sphere
or the plateau model: uniform over the region where the analytic ID density
falls below a cutoff, realized by exact rejection. A norm-disparity variant
attaches raw norms to the unit directions for the normalization ablation.

Everything is deterministic per seed; independent substreams keep the ID
sample, OOD sample, split, logits, and norms reproducible in isolation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ive

from .embed_io import EmbeddingSet, LogitSet
from .theory import sphere_surface_area

_MIN_ACCEPT_RATE = 1e-3


@dataclass(frozen=True)
class VmfComponent:
    mu: tuple[float, ...]
    kappa: float
    label: int | None = None  # class id; defaults to the component position

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise ValueError("component mean must be unit-norm")
        if self.kappa < 0:
            raise ValueError(f"concentration must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mu", tuple(float(v) for v in mu))

    @property
    def mu_vec(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=np.float64)


@dataclass(frozen=True)
class NormDisparity:
    id_norm_range: tuple[float, float]
    ood_norm_range: tuple[float, float]

    def __post_init__(self):
        for name, (lo, hi) in (
            ("id", self.id_norm_range), ("ood", self.ood_norm_range)
        ):
            if not (0 < lo <= hi):
                raise ValueError(f"bad {name} norm range ({lo}, {hi})")


@dataclass(frozen=True)
class SyntheticSpec:
    m: int
    classes: tuple[VmfComponent, ...]
    epsilon: float
    n_id: int
    n_ood: int
    ood_kind: str = "uniform_sphere"
    plateau_quantile: float = 0.5
    plateau_cut: float | None = None
    norm_disparity: NormDisparity | None = None
    with_logits: bool = False
    logit_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"dimension must be >= 2, got {self.m}")
        if not self.classes:
            raise ValueError("need at least one mixture component")
        classes = tuple(self.classes)
        object.__setattr__(self, "classes", classes)
        for comp in classes:
            if len(comp.mu) != self.m:
                raise ValueError("component mean dimension does not match m")
        if not (0 < self.epsilon < 1):
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.n_id < 1 or self.n_ood < 1:
            raise ValueError("sample counts must be >= 1")
        if self.ood_kind not in ("uniform_sphere", "plateau_outside_id"):
            raise ValueError(f"unknown ood_kind {self.ood_kind!r}")
        if not (0 < self.plateau_quantile <= 1):
            raise ValueError("plateau_quantile must lie in (0, 1]")

    def component_labels(self) -> np.ndarray:
        return np.array(
            [c.label if c.label is not None else i
             for i, c in enumerate(self.classes)],
            dtype=np.int64,
        )


@dataclass(frozen=True)
class Benchmark:
    spec: SyntheticSpec
    id_train: EmbeddingSet
    id_test: EmbeddingSet
    ood_test: EmbeddingSet
    id_test_logits: LogitSet | None = None
    ood_test_logits: LogitSet | None = None
    raw_id_train: EmbeddingSet | None = None
    raw_id_test: EmbeddingSet | None = None
    raw_ood_test: EmbeddingSet | None = None


def _rng(spec: SyntheticSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream])


def uniform_sphere(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((n, m))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _vmf_cosines(kappa: float, m: int, n: int, rng: np.random.Generator):
    """Rejection-sample the cosine of the angle to the mean direction."""
    d = m - 1
    b = d / (math.sqrt(4.0 * kappa * kappa + d * d) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d * math.log(1.0 - x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        todo = n - filled
        batch = todo + (todo >> 2) + 16
        z = rng.beta(0.5 * d, 0.5 * d, size=batch)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=batch)
        ok = kappa * w + d * np.log1p(-x0 * w) - c >= np.log(u)
        take = w[ok][:todo]
        out[filled:filled + take.size] = take
        filled += take.size
    return out


def sample_vmf(mu: np.ndarray, kappa: float, n: int,
               rng: np.random.Generator) -> np.ndarray:
    """Draw n unit vectors from one von Mises-Fisher component."""
    mu = np.asarray(mu, dtype=np.float64)
    m = mu.size
    if kappa == 0:
        return uniform_sphere(n, m, rng)
    w = _vmf_cosines(kappa, m, n, rng)
    g = rng.standard_normal((n, m))
    g -= (g @ mu)[:, None] * mu
    t = g / np.linalg.norm(g, axis=1, keepdims=True)
    pts = t * np.sqrt(np.maximum(0.0, 1.0 - w * w))[:, None] + w[:, None] * mu
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def sample_vmf_mixture(spec: SyntheticSpec, n: int,
                       rng: np.random.Generator) -> np.ndarray:
    pts, _ = _sample_mixture_labeled(spec, n, rng)
    return pts


def _sample_mixture_labeled(spec: SyntheticSpec, n: int, rng: np.random.Generator):
    ncomp = len(spec.classes)
    comp_idx = rng.integers(0, ncomp, size=n)
    pts = np.empty((n, spec.m))
    for ci, comp in enumerate(spec.classes):
        rows = np.nonzero(comp_idx == ci)[0]
        if rows.size:
            pts[rows] = sample_vmf(comp.mu_vec, comp.kappa, rows.size, rng)
    labels = spec.component_labels()[comp_idx]
    return pts, labels


def _vmf_log_pdf(mu: np.ndarray, kappa: float, points: np.ndarray,
                 m: int) -> np.ndarray:
    if kappa == 0:
        return np.full(points.shape[0], -math.log(sphere_surface_area(m)))
    nu = 0.5 * m - 1.0
    t = points @ mu
    log_norm = nu * math.log(kappa) - 0.5 * m * math.log(2.0 * math.pi) \
        - math.log(ive(nu, kappa))
    return log_norm + kappa * (t - 1.0)


def mixture_density(spec: SyntheticSpec, points: np.ndarray) -> np.ndarray:
    """Analytic equal-weight mixture density per unit surface measure."""
    points = np.asarray(points, dtype=np.float64)
    logs = np.stack(
        [_vmf_log_pdf(c.mu_vec, c.kappa, points, spec.m) for c in spec.classes]
    )
    peak = logs.max(axis=0)
    dens = np.exp(logs - peak).sum(axis=0) * np.exp(peak) / len(spec.classes)
    return dens


def sample_id(spec: SyntheticSpec) -> EmbeddingSet:
    """Labeled ID sample from the mixture; deterministic per seed."""
    pts, labels = _sample_mixture_labeled(spec, spec.n_id, _rng(spec, 1))
    return EmbeddingSet(
        data=pts, labels=labels, normalized=True, source_tag="synth-id"
    )


def plateau_cutoff(spec: SyntheticSpec) -> float:
    """Resolve the plateau density cutoff: explicit value, or the configured
    quantile of the ID density over a fresh mixture probe."""
    if spec.plateau_cut is not None:
        return float(spec.plateau_cut)
    probe_n = min(max(spec.n_id, 2000), 20000)
    probe = sample_vmf_mixture(spec, probe_n, _rng(spec, 5))
    dens = mixture_density(spec, probe)
    return float(np.quantile(dens, spec.plateau_quantile))


def sample_ood(spec: SyntheticSpec) -> EmbeddingSet:
    """Unlabeled OOD sample: uniform on the sphere, or uniform restricted to
    the low-ID-density region (exact rejection against the analytic mixture)."""
    rng = _rng(spec, 2)
    if spec.ood_kind == "uniform_sphere":
        pts = uniform_sphere(spec.n_ood, spec.m, rng)
        return EmbeddingSet(data=pts, normalized=True, source_tag="synth-ood")
    c1 = plateau_cutoff(spec)
    kept = []
    drawn = accepted = 0
    need = spec.n_ood
    while need > 0:
        batch = max(4096, 2 * need)
        cand = uniform_sphere(batch, spec.m, rng)
        ok = mixture_density(spec, cand) < c1
        take = cand[ok][:need]
        kept.append(take)
        drawn += batch
        accepted += int(ok.sum())
        need -= take.shape[0]
        if drawn >= 4096 and accepted < _MIN_ACCEPT_RATE * drawn:
            raise ValueError(
                f"plateau rejection acceptance rate {accepted / drawn:.2e} "
                f"below {_MIN_ACCEPT_RATE:g}; raise the cutoff"
            )
    pts = np.vstack(kept)
    return EmbeddingSet(data=pts, normalized=True, source_tag="synth-ood")


def _synthetic_logits(spec: SyntheticSpec, points: np.ndarray) -> LogitSet:
    """Scaled log class posteriors under the analytic mixture."""
    labels = spec.component_labels()
    class_ids = np.unique(labels)
    if class_ids.size < 2:
        raise ValueError("synthetic logits need at least two classes")
    comp_logs = np.stack(
        [_vmf_log_pdf(c.mu_vec, c.kappa, points, spec.m) for c in spec.classes]
    )
    cols = []
    for cid in class_ids:
        rows = comp_logs[labels == cid]
        peak = rows.max(axis=0)
        cols.append(peak + np.log(np.exp(rows - peak).sum(axis=0) / rows.shape[0]))
    log_dens = np.column_stack(cols)
    peak = log_dens.max(axis=1, keepdims=True)
    log_post = log_dens - (
        peak + np.log(np.exp(log_dens - peak).sum(axis=1, keepdims=True))
    )
    return LogitSet(data=spec.logit_scale * log_post)


def make_benchmark(spec: SyntheticSpec) -> Benchmark:
    """Deterministic 80/20 ID train/test split plus the OOD test set.

    With ``spec.with_logits``, test sets also carry synthetic logits whose
    argmax recovers the true class for concentrated mixtures. With
    ``spec.norm_disparity``, raw variants attach norms to the directions.
    """
    ids = sample_id(spec)
    ood = sample_ood(spec)
    n = spec.n_id
    n_train = int(math.floor(0.8 * n + 0.5))
    perm = _rng(spec, 3).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    if te.size == 0:
        raise ValueError("n_id too small for an 80/20 split")
    id_train = EmbeddingSet(
        data=ids.data[tr], labels=ids.labels[tr],
        normalized=True, source_tag="synth-id-train",
    )
    id_test = EmbeddingSet(
        data=ids.data[te], labels=ids.labels[te],
        normalized=True, source_tag="synth-id-test",
    )

    id_logits = ood_logits = None
    if spec.with_logits:
        id_logits = _synthetic_logits(spec, id_test.data)
        ood_logits = _synthetic_logits(spec, ood.data)

    raw_train = raw_test = raw_ood = None
    if spec.norm_disparity is not None:
        nd = spec.norm_disparity
        id_norms = _rng(spec, 6).uniform(*nd.id_norm_range, size=n)
        ood_norms = _rng(spec, 7).uniform(*nd.ood_norm_range, size=spec.n_ood)
        raw_id = ids.data * id_norms[:, None]
        raw_train = EmbeddingSet(
            data=raw_id[tr], labels=ids.labels[tr], source_tag="synth-raw-id-train"
        )
        raw_test = EmbeddingSet(
            data=raw_id[te], labels=ids.labels[te], source_tag="synth-raw-id-test"
        )
        raw_ood = EmbeddingSet(
            data=ood.data * ood_norms[:, None], source_tag="synth-raw-ood"
        )

    return Benchmark(
        spec=spec,
        id_train=id_train,
        id_test=id_test,
        ood_test=ood,
        id_test_logits=id_logits,
        ood_test_logits=ood_logits,
        raw_id_train=raw_train,
        raw_id_test=raw_test,
        raw_ood_test=raw_ood,
    )


def spread_means(m: int, count: int, seed: int = 0) -> list[np.ndarray]:
    """Deterministic well-separated unit vectors to use as class means
    (orthonormal while count <= m, random beyond)."""
    rng = np.random.default_rng([seed, 0x3EAD])
    g = rng.standard_normal((m, max(count, 1)))
    if count <= m:
        q, _ = np.linalg.qr(g[:, :count])
        return [np.ascontiguousarray(q[:, i]) for i in range(count)]
    extra = uniform_sphere(count - m, m, rng)
    q, _ = np.linalg.qr(g[:, :m])
    return [np.ascontiguousarray(q[:, i]) for i in range(m)] + list(extra)


# ---------------------------------------------------------------------------
# manifest (text) round-trip


def spec_to_manifest(spec: SyntheticSpec) -> str:
    doc = {
        "m": spec.m,
        "classes": [
            {"mu": list(c.mu), "kappa": c.kappa,
             **({"label": c.label} if c.label is not None else {})}
            for c in spec.classes
        ],
        "epsilon": spec.epsilon,
        "n_id": spec.n_id,
        "n_ood": spec.n_ood,
        "ood_kind": spec.ood_kind,
        "plateau_quantile": spec.plateau_quantile,
        "plateau_cut": spec.plateau_cut,
        "norm_disparity": (
            None if spec.norm_disparity is None else {
                "id_norm_range": list(spec.norm_disparity.id_norm_range),
                "ood_norm_range": list(spec.norm_disparity.ood_norm_range),
            }
        ),
        "with_logits": spec.with_logits,
        "logit_scale": spec.logit_scale,
        "seed": spec.seed,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def spec_from_manifest(text: str) -> SyntheticSpec:
    doc = json.loads(text)
    classes = doc["classes"]
    if isinstance(classes, dict):  # {"count": C, "kappa": K} auto-placement
        mus = spread_means(doc["m"], classes["count"], seed=doc.get("seed", 0))
        comps = tuple(
            VmfComponent(mu=tuple(mu), kappa=classes["kappa"]) for mu in mus
        )
    else:
        comps = tuple(
            VmfComponent(
                mu=tuple(c["mu"]), kappa=c["kappa"], label=c.get("label")
            )
            for c in classes
        )
    nd = doc.get("norm_disparity")
    return SyntheticSpec(
        m=doc["m"],
        classes=comps,
        epsilon=doc["epsilon"],
        n_id=doc["n_id"],
        n_ood=doc["n_ood"],
        ood_kind=doc.get("ood_kind", "uniform_sphere"),
        plateau_quantile=doc.get("plateau_quantile", 0.5),
        plateau_cut=doc.get("plateau_cut"),
        norm_disparity=(
            None if nd is None else NormDisparity(
                id_norm_range=tuple(nd["id_norm_range"]),
                ood_norm_range=tuple(nd["ood_norm_range"]),
            )
        ),
        with_logits=doc.get("with_logits", False),
        logit_scale=doc.get("logit_scale", 1.0),
        seed=doc.get("seed", 0),
    )
