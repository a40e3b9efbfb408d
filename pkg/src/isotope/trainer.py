"""Supervised training of the classifier on possibly mark-bearing datasets.

Minibatch SGD (with momentum) or Adam on cross-entropy, with on-the-fly
augmentation, optional layer freezing for transfer-learning studies, and
targeted fine-tuning for forced-forgetting experiments.  Runs are
bit-deterministic given the config seed: data order, augmentation draws,
and updates all come from one PCG64 stream, single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .imgdata import AugmentationPolicy, LabeledDataset, Rng, augment_batch
from .model import Architecture, Classifier, net_backward, net_forward, softmax

_DIVERGENCE_LOSS = 1e4


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or exceeded the divergence guard."""


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    schedule_every: int = 0  # step schedule period in epochs; 0 disables
    schedule_gamma: float = 1.0
    frozen_layers: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        # lr == 0 is allowed as a degenerate no-op optimizer
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.frozen_layers < 0:
            raise ValueError("frozen_layers must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if self.schedule_every > 0:
            return self.lr * self.schedule_gamma ** (epoch // self.schedule_every)
        return self.lr

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        return TrainConfig(**doc)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_loss: Optional[float] = None
    eval_acc: Optional[float] = None

    def csv_rows(self) -> list[tuple]:
        rows = [(self.epoch, "train", self.train_loss, self.train_acc)]
        if self.eval_loss is not None:
            rows.append((self.epoch, "test", self.eval_loss, self.eval_acc))
        return rows


def _make_optimizer(config: TrainConfig, params: dict, trainable: list[str]):
    """Returns apply(grads, lr) updating the trainable params in place."""
    if config.optimizer == "sgd":
        velocity = {k: np.zeros_like(params[k]) for k in trainable}

        def apply(grads: dict, lr: float) -> None:
            for name in trainable:
                g = grads[name] + config.weight_decay * params[name]
                velocity[name] = config.momentum * velocity[name] + g
                params[name] -= (lr * velocity[name]).astype(params[name].dtype)

        return apply

    m = {k: np.zeros_like(params[k]) for k in trainable}
    v = {k: np.zeros_like(params[k]) for k in trainable}
    steps = [0]

    def apply(grads: dict, lr: float) -> None:
        steps[0] += 1
        bc1 = 1 - config.beta1 ** steps[0]
        bc2 = 1 - config.beta2 ** steps[0]
        for name in trainable:
            g = grads[name] + config.weight_decay * params[name]
            m[name] = config.beta1 * m[name] + (1 - config.beta1) * g
            v[name] = config.beta2 * v[name] + (1 - config.beta2) * g * g
            update = lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + config.eps)
            params[name] -= update.astype(params[name].dtype)

    return apply


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean -log p(true class); >= 0 for one-hot targets."""
    picked = probs[np.arange(labels.size), labels]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(picked)))


def evaluate(model: Classifier, dataset: LabeledDataset,
             batch_size: int = 256) -> tuple[float, float]:
    """(cross-entropy, accuracy) on raw images via the model's own preprocessing."""
    losses = []
    correct = 0
    for start in range(0, dataset.n, batch_size):
        sl = slice(start, start + batch_size)
        probs = model.forward(dataset.images[sl])
        labels = dataset.labels[sl]
        losses.append(cross_entropy(probs, labels) * labels.size)
        correct += int((probs.argmax(axis=1) == labels).sum())
    return sum(losses) / dataset.n, correct / dataset.n


def train(
    model: Classifier,
    dataset: LabeledDataset,
    config: TrainConfig,
    policy: AugmentationPolicy,
    eval_dataset: Optional[LabeledDataset] = None,
    eval_labels: Optional[Sequence[int]] = None,
) -> tuple[Classifier, list[EpochMetrics]]:
    """Train a copy of the model; the input model is left untouched.

    Returns the trained classifier and per-epoch metrics.  The first
    ``config.frozen_layers`` layers (in input-to-output order) receive no
    updates and stay bitwise unchanged.  Raises :class:`TrainingDiverged`
    instead of silently continuing when the loss blows up.
    """
    if dataset.num_classes != model.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model expects {model.num_classes}"
        )
    if dataset.dims != model.input_dims:
        raise ValueError(f"dataset dims {dataset.dims} != model input {model.input_dims}")
    layer_names = model.arch.layer_names
    if config.frozen_layers >= len(layer_names):
        raise ValueError(
            f"frozen_layers must be < {len(layer_names)} (total trainable layers)"
        )

    mean, std = policy.effective_stats(dataset.dims[0])
    trained = model.copy()
    trained.norm_mean = mean.copy()
    trained.norm_std = std.copy()

    if eval_dataset is not None and eval_labels is not None:
        keep = np.isin(eval_dataset.labels, np.asarray(list(eval_labels)))
        eval_dataset = eval_dataset.subset(np.nonzero(keep)[0])

    params = trained.params
    frozen = set(layer_names[: config.frozen_layers])
    trainable = [k for k in params if k.rsplit("_", 1)[0] not in frozen]
    opt_apply = _make_optimizer(config, params, trainable)
    gen = Rng(config.seed).generator()
    metrics: list[EpochMetrics] = []

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        perm = gen.permutation(dataset.n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, dataset.n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = augment_batch(dataset.images[idx], policy, gen)
            labels = dataset.labels[idx]
            logits, cache = net_forward(params, model.arch, x, with_cache=True)
            probs = softmax(logits)
            batch_loss = cross_entropy(probs, labels)
            if not math.isfinite(batch_loss) or batch_loss > _DIVERGENCE_LOSS:
                raise TrainingDiverged(
                    f"loss {batch_loss} at epoch {epoch}, batch offset {start}"
                )
            loss_sum += batch_loss * labels.size
            correct += int((probs.argmax(axis=1) == labels).sum())
            dlogits = probs
            dlogits[np.arange(labels.size), labels] -= 1.0
            dlogits = (dlogits / labels.size).astype(np.float32)
            grads = net_backward(params, model.arch, cache, dlogits)
            opt_apply(grads, lr)
        entry = EpochMetrics(epoch, loss_sum / dataset.n, correct / dataset.n)
        if eval_dataset is not None and eval_dataset.n:
            entry.eval_loss, entry.eval_acc = evaluate(trained, eval_dataset)
        metrics.append(entry)
    return trained, metrics


def targeted_finetune(
    model: Classifier,
    replacement_data: LabeledDataset,
    target_classes: Sequence[int],
    config: TrainConfig,
    policy: Optional[AugmentationPolicy] = None,
    eval_dataset: Optional[LabeledDataset] = None,
) -> tuple[Classifier, list[Optional[float]]]:
    """Continue training on replacement data for the target classes only.

    Returns the updated model and the per-epoch accuracy trajectory on
    ``eval_dataset`` restricted to the target classes (the original marked
    classes, when studying forced forgetting).
    """
    if replacement_data.n == 0:
        raise ValueError("replacement dataset is empty")
    targets = set(int(t) for t in target_classes)
    present = set(int(v) for v in np.unique(replacement_data.labels))
    if not present <= targets:
        raise ValueError(
            f"replacement data carries labels {sorted(present - targets)} "
            "outside the target classes"
        )
    if policy is None:
        policy = AugmentationPolicy(
            norm_mean=tuple(float(v) for v in model.norm_mean),
            norm_std=tuple(float(v) for v in model.norm_std),
        )
    tuned, metrics = train(
        model, replacement_data, config, policy,
        eval_dataset=eval_dataset, eval_labels=sorted(targets),
    )
    return tuned, [m.eval_acc for m in metrics]


def grad_check(
    model: Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    step: float = 1e-5,
    max_per_layer: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Everything runs in float64.  ``max_per_layer`` caps the number of
    coordinates checked per parameter tensor (seeded random choice), which
    keeps large models tractable while still covering every layer.
    """
    from .imgdata import normalize  # local import to avoid cycle at module load

    x = normalize(
        np.asarray(images, dtype=np.float64), model.norm_mean, model.norm_std
    )
    labels = np.asarray(labels, dtype=np.int64)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    pick = Rng(seed).generator()

    def loss_of(p: dict) -> float:
        logits, _ = net_forward(p, model.arch, x)
        return cross_entropy(softmax(logits), labels)

    logits, cache = net_forward(params, model.arch, x, with_cache=True)
    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(labels.size), labels] -= 1.0
    dlogits /= labels.size
    grads = net_backward(params, model.arch, cache, dlogits)

    worst = 0.0
    for name, w in params.items():
        flat = w.ravel()
        gflat = grads[name].ravel()
        if max_per_layer is not None and flat.size > max_per_layer:
            coords = np.sort(pick.choice(flat.size, size=max_per_layer, replace=False))
        else:
            coords = np.arange(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_of(params)
            flat[i] = orig - step
            lo = loss_of(params)
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            denom = max(abs(gflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
