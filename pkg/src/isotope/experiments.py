"""End-to-end experiment pipeline: data -> marks -> training -> audit.

One :class:`ExperimentSpec` describes a full desk-scale run; everything
derives deterministically from its seed.  The attack sweep, the CLI, and
the acceptance suite all funnel through :func:`run_experiment` so results
agree across entry points.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .countermeasures import AttackConfig, blanket_mark_dataset, noise_dataset
from .imgdata import (
    AugmentationPolicy,
    LabeledDataset,
    Rng,
    compute_norm_stats,
    generate_synthetic_dataset,
)
from .marks import IsotopePlan, MarkSpec, apply_plan, make_mark
from .model import Architecture, Classifier, init_classifier, wrap_logit_noise, wrap_topk
from .trainer import TrainConfig, train, targeted_finetune
from .verifier import HarnessResult, MarkTrial, VerifierConfig, metrics_harness

# Substream ids carved from the experiment seed.
_S_DATA = 10
_S_MARKS = 11
_S_PLANS = 12
_S_EXTERNALS = 13
_S_INIT = 14
_S_TRAIN = 15
_S_VERIFY = 16
_S_ATTACK = 17


@dataclass(frozen=True)
class PlanSpec:
    """One mark to plant: which class, how visible, how much of the class."""

    target_class: int
    alpha: float = 0.4
    fraction: float = 0.25
    kind: str = "blend_image"


@dataclass(frozen=True)
class ExperimentSpec:
    """Deterministic description of a full train-and-audit run."""

    seed: int = 0
    num_classes: int = 10
    per_class: int = 300
    test_per_class: int = 50
    dims: tuple[int, int, int] = (3, 32, 32)
    plans: tuple[PlanSpec, ...] = (PlanSpec(target_class=3),)
    train_config: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            optimizer="sgd", lr=0.01, momentum=0.9, weight_decay=1e-3,
            epochs=20, batch_size=64,
        )
    )
    flip_prob: float = 0.5
    crop_padding: int = 2
    rotation_degrees: float = 10.0
    verifier: VerifierConfig = field(default_factory=VerifierConfig)
    externals_per_mark: int = 5
    arch: Optional[Architecture] = None

    def architecture(self) -> Architecture:
        if self.arch is not None:
            return self.arch
        return Architecture(input_dims=self.dims, num_classes=self.num_classes)


@dataclass
class ExperimentResult:
    model: Classifier
    endpoint: object
    accuracy: float
    baseline_model: Optional[Classifier]
    baseline_accuracy: Optional[float]
    metrics: HarnessResult
    trials: list[MarkTrial]
    train_dataset: LabeledDataset
    test_dataset: LabeledDataset


def build_data(spec: ExperimentSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test splits with normalization stats from the train split."""
    rng = Rng(spec.seed, _S_DATA)
    train_ds = generate_synthetic_dataset(
        spec.num_classes, spec.per_class, spec.dims, rng, split="train"
    )
    mean, std = compute_norm_stats(train_ds)
    test_ds = generate_synthetic_dataset(
        spec.num_classes, spec.test_per_class, spec.dims, rng, split="test"
    )
    return train_ds.with_norm_stats(mean, std), test_ds.with_norm_stats(mean, std)


def build_trials(spec: ExperimentSpec) -> list[MarkTrial]:
    """True marks plus their external controls, same kind per the audit setup."""
    trials = []
    for i, plan in enumerate(spec.plans):
        mark = make_mark(
            plan.kind, spec.dims, Rng(spec.seed, _S_MARKS * 1000 + i),
            alpha=plan.alpha, mark_id=f"true-{i}-c{plan.target_class}-s{spec.seed}",
        )
        externals = tuple(
            make_mark(
                plan.kind, spec.dims,
                Rng(spec.seed, _S_EXTERNALS * 1000 + i * 100 + e),
                alpha=plan.alpha, mark_id=f"ext-{i}.{e}-s{spec.seed}",
            )
            for e in range(spec.externals_per_mark)
        )
        trials.append(
            MarkTrial(mark=mark, target_class=plan.target_class, externals=externals)
        )
    return trials


def mark_dataset(spec: ExperimentSpec, train_ds: LabeledDataset,
                 trials: list[MarkTrial]) -> LabeledDataset:
    marked = train_ds
    for i, (plan, trial) in enumerate(zip(spec.plans, trials)):
        marked = apply_plan(
            marked,
            IsotopePlan(
                mark=trial.mark,
                target_class=plan.target_class,
                fraction=plan.fraction,
                rng=Rng(spec.seed, _S_PLANS * 1000 + i),
            ),
        )
    return marked


def train_victim(
    spec: ExperimentSpec,
    dataset: LabeledDataset,
    test_ds: LabeledDataset,
    seed_shift: int = 0,
) -> tuple[Classifier, float]:
    policy = AugmentationPolicy.for_dataset(
        dataset,
        flip_prob=spec.flip_prob,
        crop_padding=spec.crop_padding,
        rotation_degrees=spec.rotation_degrees,
    )
    model = init_classifier(
        spec.architecture(), Rng(spec.seed, _S_INIT + seed_shift)
    )
    config = replace(spec.train_config, seed=spec.seed * 1000 + _S_TRAIN + seed_shift)
    trained, metrics = train(model, dataset, config, policy, eval_dataset=test_ds)
    return trained, float(metrics[-1].eval_acc)


def _apply_attack(
    spec: ExperimentSpec,
    attack: Optional[AttackConfig],
    marked_train: LabeledDataset,
    test_ds: LabeledDataset,
) -> tuple[Classifier, object, float, VerifierConfig]:
    """Train the victim under the attack; returns (model, endpoint, accuracy, cfg)."""
    verifier_cfg = spec.verifier
    attack_rng = Rng(spec.seed, _S_ATTACK)

    dataset = marked_train
    if attack is not None and attack.kind == "image_noise":
        dataset = noise_dataset(marked_train, attack.sigma, attack_rng)
    elif attack is not None and attack.kind == "extra_mark":
        dataset = blanket_mark_dataset(marked_train, attack.mark, attack.alpha_prime)
    elif attack is not None and attack.kind == "knn_outlier":
        dataset = _knn_filter(spec, marked_train, test_ds, attack)

    model, accuracy = train_victim(spec, dataset, test_ds)
    endpoint: object = model

    if attack is not None and attack.kind == "logit_noise":
        endpoint = wrap_logit_noise(model, attack.sigma, attack_rng)
        if attack.sigma > 0:
            accuracy = _endpoint_accuracy(endpoint, test_ds)
    elif attack is not None and attack.kind == "topk":
        endpoint = wrap_topk(model, attack.top_k)
        verifier_cfg = replace(verifier_cfg, mode="rank")
    elif attack is not None and attack.kind == "finetune":
        if attack.replacement is None:
            raise ValueError("finetune attack needs replacement data")
        cfg = replace(
            spec.train_config, epochs=attack.epochs,
            seed=spec.seed * 1000 + _S_ATTACK,
        )
        targets = sorted({p.target_class for p in spec.plans})
        model, _ = targeted_finetune(
            model, attack.replacement, targets, cfg, eval_dataset=test_ds
        )
        endpoint = model
        from .trainer import evaluate

        accuracy = evaluate(model, test_ds)[1]
    return model, endpoint, accuracy, verifier_cfg


def _knn_filter(
    spec: ExperimentSpec,
    marked_train: LabeledDataset,
    test_ds: LabeledDataset,
    attack: AttackConfig,
) -> LabeledDataset:
    """Drop the most outlying fraction of the training set before training.

    ``attack.threshold`` is the fraction of data discarded (the cutoff is
    the matching score quantile); features come from a model trained on a
    disjoint task instance, L2-normalized at the penultimate layer.
    """
    from .countermeasures import knn_outlier_scores

    extractor_spec = replace(spec, seed=spec.seed * 31 + 7, plans=())
    ex_train, ex_test = build_data(extractor_spec)
    extractor, _ = train_victim(extractor_spec, ex_train, ex_test, seed_shift=700)

    def feats(images: np.ndarray) -> np.ndarray:
        v = extractor.features_batch(images, "dense0")
        return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)

    scores, _ = knn_outlier_scores(marked_train, feats, k=attack.neighbors)
    cutoff = float(np.quantile(scores, 1.0 - attack.threshold))
    keep = np.nonzero(scores < cutoff)[0]
    return marked_train.subset(keep)


def _endpoint_accuracy(endpoint, test_ds: LabeledDataset, batch: int = 256) -> float:
    correct = 0
    for start in range(0, test_ds.n, batch):
        out = endpoint.query(test_ds.images[start : start + batch])
        correct += int(
            (out.probs.argmax(axis=1) == test_ds.labels[start : start + batch]).sum()
        )
    return correct / test_ds.n


def run_experiment(
    spec: ExperimentSpec,
    attack: Optional[AttackConfig] = None,
    with_baseline: bool = False,
) -> ExperimentResult:
    """Generate data, plant marks, train (under an optional attack), audit."""
    train_ds, test_ds = build_data(spec)
    trials = build_trials(spec)
    marked_train = mark_dataset(spec, train_ds, trials)

    baseline_model = None
    baseline_acc = None
    if with_baseline:
        baseline_model, baseline_acc = train_victim(spec, train_ds, test_ds, seed_shift=500)

    model, endpoint, accuracy, verifier_cfg = _apply_attack(
        spec, attack, marked_train, test_ds
    )
    harness = metrics_harness(
        endpoint, test_ds, trials, verifier_cfg, Rng(spec.seed, _S_VERIFY)
    )
    return ExperimentResult(
        model=model,
        endpoint=endpoint,
        accuracy=accuracy,
        baseline_model=baseline_model,
        baseline_accuracy=baseline_acc,
        metrics=harness,
        trials=trials,
        train_dataset=marked_train,
        test_dataset=test_ds,
    )
