"""Adversarial model-trainer toolkit for stress-testing mark detection.

Dataset-level disruption (pixel noise, blanket adversary marks), output
wrappers (handled through the model module), kNN outlier detection of
marked training images, and a sweep runner that trains/wraps a model per
attack point and tabulates detection-rate-versus-accuracy cost curves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .imgdata import LabeledDataset, Rng
from .marks import MarkSpec, insert_mark_batch

_ATTACK_KINDS = (
    "image_noise",
    "extra_mark",
    "logit_noise",
    "topk",
    "finetune",
    "knn_outlier",
)


@dataclass(frozen=True)
class AttackConfig:
    """One countermeasure and its strength parameter(s)."""

    kind: str
    sigma: float = 0.0  # image_noise / logit_noise
    alpha_prime: float = 0.0  # extra_mark blend strength
    mark: Optional[MarkSpec] = None  # extra_mark pattern
    top_k: int = 0  # topk truncation
    epochs: int = 0  # finetune duration
    replacement: Optional[LabeledDataset] = None  # finetune data
    neighbors: int = 0  # knn_outlier k
    threshold: float = 0.0  # knn_outlier score cutoff
    label: str = ""  # free-form tag for sweep rows

    def __post_init__(self) -> None:
        if self.kind not in _ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.alpha_prime <= 1.0:
            raise ValueError("alpha_prime must be in [0, 1]")
        if self.kind == "extra_mark" and self.mark is None:
            raise ValueError("extra_mark needs a mark")
        if self.kind == "topk" and self.top_k < 1:
            raise ValueError("topk needs K >= 1")
        if self.kind == "knn_outlier" and self.neighbors < 1:
            raise ValueError("knn_outlier needs neighbors >= 1")

    @property
    def parameter(self) -> float:
        if self.kind in ("image_noise", "logit_noise"):
            return self.sigma
        if self.kind == "extra_mark":
            return self.alpha_prime
        if self.kind == "topk":
            return float(self.top_k)
        if self.kind == "finetune":
            return float(self.epochs)
        return self.threshold


def noise_dataset(dataset: LabeledDataset, sigma: float, rng: Rng) -> LabeledDataset:
    """Add i.i.d. N(0, sigma) pixel noise, clamped to [0, 1]; sigma=0 is identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return dataset
    noisy = np.clip(
        dataset.images + rng.generator().normal(0.0, sigma, size=dataset.images.shape),
        0.0,
        1.0,
    ).astype(np.float32)
    return LabeledDataset(
        images=noisy,
        labels=dataset.labels.copy(),
        mark_ids=list(dataset.mark_ids),
        num_classes=dataset.num_classes,
        split=dataset.split,
        norm_mean=dataset.norm_mean.copy(),
        norm_std=dataset.norm_std.copy(),
    )


def blanket_mark_dataset(
    dataset: LabeledDataset, adversary_mark: MarkSpec, alpha_prime: Optional[float] = None
) -> LabeledDataset:
    """Blend the adversary's mark into every image, marked or not.

    The trainer cannot know which images carry isotopes, so the blanket
    covers the whole dataset; labels and mark_id metadata stay untouched.
    """
    mark = adversary_mark if alpha_prime is None else adversary_mark.with_alpha(alpha_prime)
    if mark.alpha == 0.0:
        return dataset
    return LabeledDataset(
        images=insert_mark_batch(dataset.images, mark),
        labels=dataset.labels.copy(),
        mark_ids=list(dataset.mark_ids),
        num_classes=dataset.num_classes,
        split=dataset.split,
        norm_mean=dataset.norm_mean.copy(),
        norm_std=dataset.norm_std.copy(),
    )


# -- kNN outlier detection -------------------------------------------------


@dataclass
class RocResult:
    """Threshold sweep of the outlier detector, pooled over classes."""

    points: list[tuple[float, float, float]]  # (fpr, tpr, threshold)
    auc: float
    scores: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    is_isotope: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, bool))


def knn_outlier_scores(
    dataset: LabeledDataset,
    feature_extractor: Callable[[np.ndarray], np.ndarray],
    k: int,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-image outlier score: mean distance to the k nearest same-class
    neighbors in feature space.  Returns (scores, isotope flags)."""
    feats = np.concatenate(
        [
            np.asarray(
                feature_extractor(dataset.images[i : i + batch_size]), dtype=np.float64
            )
            for i in range(0, dataset.n, batch_size)
        ]
    )
    scores = np.empty(dataset.n, dtype=np.float64)
    for label in range(dataset.num_classes):
        idx = dataset.class_indices(label)
        if idx.size == 0:
            continue
        if idx.size < k + 1:
            raise ValueError(
                f"class {label} has {idx.size} images, kNN scoring needs > {k}"
            )
        f = feats[idx]
        sq = np.sum(f * f, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (f @ f.T), 0.0)
        np.fill_diagonal(d2, np.inf)  # exclude self
        nearest = np.sort(np.sqrt(d2), axis=1)[:, :k]
        scores[idx] = nearest.mean(axis=1)
    flags = np.array([m is not None for m in dataset.mark_ids])
    return scores, flags


def knn_outlier_roc(
    dataset: LabeledDataset,
    feature_extractor: Callable[[np.ndarray], np.ndarray],
    k: int,
    thresholds: Optional[Sequence[float]] = None,
) -> RocResult:
    """ROC of flagging isotopes as outliers while sweeping the score cutoff.

    TPR counts isotope images flagged; FPR counts clean images flagged.
    With no explicit thresholds, every observed score is used, which makes
    the trapezoid AUC exact.
    """
    scores, flags = knn_outlier_scores(dataset, feature_extractor, k)
    n_iso = int(flags.sum())
    n_clean = int((~flags).sum())
    if n_iso == 0 or n_clean == 0:
        raise ValueError("dataset needs both isotope and clean images for an ROC")
    if thresholds is None:
        cuts = np.concatenate(([np.inf], np.unique(scores)[::-1]))
    else:
        cuts = np.sort(np.asarray(list(thresholds), dtype=np.float64))[::-1]
    points = []
    for cut in cuts:
        flagged = scores >= cut
        tpr = float((flagged & flags).sum() / n_iso)
        fpr = float((flagged & ~flags).sum() / n_clean)
        points.append((fpr, tpr, float(cut)))
    points.sort(key=lambda p: (p[0], p[1]))
    if points[0][:2] != (0.0, 0.0):
        points.insert(0, (0.0, 0.0, float("inf")))
    if points[-1][:2] != (1.0, 1.0):
        points.append((1.0, 1.0, float("-inf")))
    fprs = np.array([p[0] for p in points])
    tprs = np.array([p[1] for p in points])
    auc = float(np.trapezoid(tprs, fprs))
    return RocResult(points=points, auc=auc, scores=scores, is_isotope=flags)


# -- attack sweep ----------------------------------------------------------

SWEEP_SCHEMA_VERSION = 1
SWEEP_COLUMNS = [
    "schema_version",
    "attack",
    "parameter",
    "seed",
    "accuracy",
    "v_t",
    "v_f",
    "v_dt",
    "error",
]


def write_sweep_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in SWEEP_COLUMNS})


def run_attack_sweep(
    experiment,
    attack_grid: Sequence[AttackConfig],
    out_csv: Optional[str | Path] = None,
) -> list[dict]:
    """Evaluate each attack point end to end and tabulate cost vs efficacy.

    ``experiment`` is an :class:`isotope.experiments.ExperimentSpec`; each
    grid point trains (or wraps) the victim model under the attack and
    runs the metrics harness.  Failures are recorded in their row and the
    sweep continues.
    """
    from .experiments import run_experiment  # deferred: experiments imports us

    rows: list[dict] = []
    for attack in attack_grid:
        row = {
            "schema_version": SWEEP_SCHEMA_VERSION,
            "attack": attack.label or attack.kind,
            "parameter": attack.parameter,
            "seed": experiment.seed,
        }
        try:
            result = run_experiment(experiment, attack=attack)
            row.update(
                accuracy=result.accuracy,
                v_t=result.metrics.true_positive_rate,
                v_f=result.metrics.false_positive_rate,
                v_dt="" if result.metrics.distinguisher_rate is None
                else result.metrics.distinguisher_rate,
                error="",
            )
        except Exception as exc:  # record and continue per sweep contract
            row.update(accuracy="", v_t="", v_f="", v_dt="", error=str(exc))
        rows.append(row)
    if out_csv is not None:
        write_sweep_csv(rows, out_csv)
    return rows
