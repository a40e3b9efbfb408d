"""Data isotopes: plant spurious-feature marks in image data, then audit
black-box classifiers for evidence they trained on the marked data."""

from .imgdata import (
    AugmentationPolicy,
    LabeledDataset,
    Rng,
    augment,
    compute_norm_stats,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from .marks import (
    IsotopePlan,
    MarkSpec,
    apply_plan,
    insert_mark,
    load_mark,
    make_mark,
    mark_interpolate,
    mark_linf_distance,
    save_mark,
)
from .model import (
    Architecture,
    Classifier,
    init_classifier,
    load_model,
    rank_of,
    save_model,
    wrap_logit_noise,
    wrap_topk,
)
from .stats import (
    TestResult,
    paired_one_sided_ttest,
    rank_shift_test,
    t_cdf,
    unpaired_one_sided_ttest,
)
from .trainer import TrainConfig, TrainingDiverged, grad_check, targeted_finetune, train
from .verifier import (
    AuditReport,
    MarkTrial,
    VerifierConfig,
    distinguish,
    metrics_harness,
    probe_candidate_label,
    verify,
)
from .countermeasures import (
    AttackConfig,
    blanket_mark_dataset,
    knn_outlier_roc,
    noise_dataset,
    run_attack_sweep,
)
from .serve import remote_endpoint, serve_model

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "LabeledDataset", "Rng", "augment",
    "compute_norm_stats", "generate_synthetic_dataset", "load_dataset",
    "save_dataset",
    "IsotopePlan", "MarkSpec", "apply_plan", "insert_mark", "load_mark",
    "make_mark", "mark_interpolate", "mark_linf_distance", "save_mark",
    "Architecture", "Classifier", "init_classifier", "load_model", "rank_of",
    "save_model", "wrap_logit_noise", "wrap_topk",
    "TestResult", "paired_one_sided_ttest", "rank_shift_test", "t_cdf",
    "unpaired_one_sided_ttest",
    "TrainConfig", "TrainingDiverged", "grad_check", "targeted_finetune", "train",
    "AuditReport", "MarkTrial", "VerifierConfig", "distinguish",
    "metrics_harness", "probe_candidate_label", "verify",
    "AttackConfig", "blanket_mark_dataset", "knn_outlier_roc", "noise_dataset",
    "run_attack_sweep",
    "remote_endpoint", "serve_model",
]
