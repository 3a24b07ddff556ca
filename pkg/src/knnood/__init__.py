"""Non-parametric k-NN out-of-distribution detection.

Scores precomputed feature embeddings by their k-th nearest-neighbor
distance to the training set, calibrates ID-coverage thresholds, and
evaluates FPR95/AUROC against parametric and non-parametric baselines.
Includes synthetic ground-truth benchmarks and empirical checks of the
contamination-model theory behind the distance rule.
"""

from .embed_io import (
    ClampSpec,
    EmbeddingSet,
    LogitSet,
    clamp_react,
    load_embeddings,
    load_logits,
    normalize,
    save_embeddings,
    save_logits,
)
from .detectors import (
    GaussianModel,
    PcaModel,
    ScoreVector,
    fit_gaussian,
    fit_pca,
    load_model,
    save_model,
    score_energy,
    score_lof,
    score_mahalanobis,
    score_msp,
    score_pca,
)
from .knn import (
    KnnIndex,
    NeighborQueryResult,
    build_index,
    decide,
    load_index,
    query_knn,
    save_index,
    score_knn,
    score_knn_multi,
)
from .evalkit import (
    EvalReport,
    SweepResult,
    auroc,
    calibrate_lambda,
    evaluate,
    fpr_at_tpr,
    sweep_k,
)
from .theory import (
    ContaminationSetup,
    DensityEstimate,
    cap_volume_constant,
    convergence_experiment,
    estimate_density,
    posterior_id,
    sphere_surface_area,
    equivalence_lambda,
    verify_decision_equivalence,
)
from .synthgen import (
    Benchmark,
    NormDisparity,
    SyntheticSpec,
    VmfComponent,
    make_benchmark,
    mixture_density,
    sample_id,
    sample_ood,
    sample_vmf,
    spread_means,
)

__version__ = "0.1.0"
