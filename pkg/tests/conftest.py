"""Shared fixtures: a tiny trained model and query-endpoint fakes.

The tiny setup (6 classes, 16x16 images, short training) backs every test
that needs a real trained classifier without paying for a full desk-scale
run.
"""

from dataclasses import dataclass

import numpy as np
import pytest

from isotope.imgdata import (
    AugmentationPolicy,
    LabeledDataset,
    Rng,
    compute_norm_stats,
    generate_synthetic_dataset,
)
from isotope.marks import IsotopePlan, MarkSpec, apply_plan, make_mark
from isotope.model import Architecture, QueryOutput, init_classifier, softmax
from isotope.trainer import TrainConfig, train

TINY_DIMS = (3, 16, 16)
TINY_CLASSES = 6


@dataclass
class TinySetup:
    train: LabeledDataset
    test: LabeledDataset
    marked_train: LabeledDataset
    mark: MarkSpec
    external: MarkSpec
    target_class: int
    model: object  # trained on marked_train
    clean_model: object  # trained on the unmarked train split
    accuracy: float


def _tiny_train_config(seed: int = 5) -> TrainConfig:
    return TrainConfig(
        optimizer="sgd", lr=0.03, momentum=0.9, weight_decay=1e-3,
        epochs=18, batch_size=32, seed=seed,
    )


@pytest.fixture(scope="session")
def tiny() -> TinySetup:
    rng = Rng(202)
    train_ds = generate_synthetic_dataset(TINY_CLASSES, 100, TINY_DIMS, rng)
    mean, std = compute_norm_stats(train_ds)
    train_ds = train_ds.with_norm_stats(mean, std)
    test_ds = generate_synthetic_dataset(
        TINY_CLASSES, 25, TINY_DIMS, rng, split="test"
    ).with_norm_stats(mean, std)

    target = 2
    mark = make_mark("blend_image", TINY_DIMS, Rng(301), alpha=0.4, mark_id="tiny-true")
    external = make_mark("blend_image", TINY_DIMS, Rng(302), alpha=0.4, mark_id="tiny-ext")
    marked = apply_plan(
        train_ds,
        IsotopePlan(mark=mark, target_class=target, fraction=0.3, rng=Rng(303)),
    )

    arch = Architecture(input_dims=TINY_DIMS, conv_channels=(8, 16),
                        dense_units=(48,), num_classes=TINY_CLASSES)
    policy = AugmentationPolicy.for_dataset(marked, rotation_degrees=8.0)
    model = init_classifier(arch, Rng(304))
    trained, metrics = train(model, marked, _tiny_train_config(), policy,
                             eval_dataset=test_ds)
    clean, _ = train(model, train_ds, _tiny_train_config(seed=6), policy)
    return TinySetup(
        train=train_ds,
        test=test_ds,
        marked_train=marked,
        mark=mark,
        external=external,
        target_class=target,
        model=trained,
        clean_model=clean,
        accuracy=float(metrics[-1].eval_acc),
    )


class ConstantEndpoint:
    """Mark-blind null: the same probability vector for every input."""

    mode = "probs"

    def __init__(self, num_classes: int, input_dims=TINY_DIMS):
        self.num_classes = num_classes
        self.input_dims = input_dims
        self._row = np.full(num_classes, 1.0 / num_classes)
        self.calls = 0
        self.images_seen = 0

    def query(self, images: np.ndarray) -> QueryOutput:
        self.calls += 1
        self.images_seen += images.shape[0]
        return QueryOutput(probs=np.tile(self._row, (images.shape[0], 1)))


class NoiseEndpoint:
    """Mark-blind null with per-query i.i.d. softmax outputs.

    Output distribution is identical no matter which mark the query
    carries, so single-round p-values are uniform under the audit's null.
    """

    mode = "probs"

    def __init__(self, num_classes: int, seed: int = 0, scale: float = 1.0):
        self.num_classes = num_classes
        self._gen = np.random.Generator(np.random.PCG64(seed))
        self.scale = scale

    def query(self, images: np.ndarray) -> QueryOutput:
        logits = self.scale * self._gen.standard_normal(
            (images.shape[0], self.num_classes)
        )
        return QueryOutput(probs=softmax(logits))


class PlantedResponder:
    """Synthetic endpoint that knows which pixel marks were 'trained'.

    Baseline probabilities depend deterministically on the image; when the
    masked pixels of a registered pixel mark match its alpha-blend (the
    square reads dark against bright auxiliary images), the planted
    class's probability gets +boost before renormalization.
    """

    mode = "probs"

    def __init__(self, num_classes: int, planted: list[tuple[MarkSpec, int]],
                 boost: float = 0.1, seed: int = 9, input_dims=TINY_DIMS):
        self.num_classes = num_classes
        self.planted = planted
        self.boost = boost
        self.input_dims = input_dims
        gen = np.random.Generator(np.random.PCG64(seed))
        flat = int(np.prod(input_dims))
        self._w = gen.normal(0, 1.0 / np.sqrt(flat), size=(num_classes, flat))

    def _detected(self, images: np.ndarray, mark: MarkSpec) -> np.ndarray:
        # pixel marks zero their masked pixels: a marked bright image reads
        # (1 - alpha) * x there, i.e. below (1 - alpha) * 1.0
        cutoff = (1.0 - mark.alpha) * 0.999 + 0.02
        vals = images[:, mark.mask]
        return vals.mean(axis=1) < cutoff

    def query(self, images: np.ndarray) -> QueryOutput:
        probs = softmax(images.reshape(images.shape[0], -1) @ self._w.T)
        for mark, cls in self.planted:
            hit = self._detected(images, mark)
            probs[hit, cls] += self.boost
        probs /= probs.sum(axis=1, keepdims=True)
        return QueryOutput(probs=probs)


def bright_aux(num_classes: int, n: int, dims=TINY_DIMS, seed: int = 40,
               exclude: tuple[int, ...] = ()) -> LabeledDataset:
    """Bright random images so pixel-square blends read unambiguously."""
    gen = np.random.Generator(np.random.PCG64(seed))
    images = gen.uniform(0.85, 1.0, size=(n, *dims)).astype(np.float32)
    allowed = [c for c in range(num_classes) if c not in exclude]
    labels = np.array([allowed[i % len(allowed)] for i in range(n)], dtype=np.int64)
    return LabeledDataset(images=images, labels=labels, mark_ids=[None] * n,
                          num_classes=num_classes)


@pytest.fixture()
def constant_endpoint() -> ConstantEndpoint:
    return ConstantEndpoint(TINY_CLASSES)
