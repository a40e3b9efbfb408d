"""Image/label containers, deterministic RNG, dataset files, and augmentations.

Images are float32 arrays in channel-major (C, H, W) order with values in
[0, 1].  A dataset is immutable after construction and safe to share
across workers; every randomized operation takes an explicit
:class:`Rng` so runs are reproducible bit-for-bit.

The on-disk format is a directory holding ``manifest.json`` plus
``data.bin`` (raw little-endian float32, C-order, images concatenated in
manifest order), chosen so round-trips are bit-exact and language-neutral.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

# Substreams carved out of an Rng so that e.g. the class patterns of a
# synthetic dataset do not depend on how many images are drawn.
_SUB_PATTERNS = 0
_SUB_TRAIN_IMAGES = 1
_SUB_TEST_IMAGES = 2

_SPLITS = ("train", "test")


class DatasetFormatError(ValueError):
    """Raised when a dataset directory fails validation on load."""


@dataclass(frozen=True)
class Rng:
    """Deterministic random stream, identified by (seed, stream).

    Backed by numpy's PCG64 seeded through ``SeedSequence(seed,
    spawn_key=(stream, substream))``, which produces identical sequences
    on every platform.  Independent consumers should use distinct stream
    ids; ``generator(substream)`` lets one logical stream hand out
    internal sub-generators without colliding.
    """

    seed: int
    stream: int = 0

    def generator(self, substream: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream, substream))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)


def check_image(image: np.ndarray, dims: Optional[tuple[int, int, int]] = None) -> np.ndarray:
    """Validate an image tensor: finite float values in [0, 1], shape (C, H, W)."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"image must be (channels, height, width), got shape {arr.shape}")
    if dims is not None and tuple(arr.shape) != tuple(dims):
        raise ValueError(f"image dims {arr.shape} do not match expected {tuple(dims)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


@dataclass
class LabeledDataset:
    """A labeled image set: training data or the auxiliary pool at audit time.

    ``mark_ids[i]`` is the identifier of the mark blended into image i, or
    None for clean images.  ``norm_mean``/``norm_std`` are the per-channel
    statistics of the training split, carried along so query-time
    preprocessing matches training exactly.
    """

    images: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64, each < num_classes
    mark_ids: list[Optional[str]]
    num_classes: int
    split: str = "train"
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        c = self.images.shape[1] if self.images.ndim == 4 else 0
        mean = np.asarray(self.norm_mean, dtype=np.float64)
        std = np.asarray(self.norm_std, dtype=np.float64)
        self.norm_mean = mean if mean.size else np.zeros(c, dtype=np.float64)
        self.norm_std = std if std.size else np.ones(c, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (n, C, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,):
            raise DatasetFormatError("labels length does not match image count")
        if len(self.mark_ids) != n:
            raise DatasetFormatError("mark_ids length does not match image count")
        if self.num_classes < 1:
            raise DatasetFormatError("num_classes must be positive")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError("label out of range for num_classes")
        if self.split not in _SPLITS:
            raise DatasetFormatError(f"split must be one of {_SPLITS}, got {self.split!r}")
        if n:
            if not np.all(np.isfinite(self.images)):
                raise DatasetFormatError("images contain non-finite values")
            if self.images.min() < 0.0 or self.images.max() > 1.0:
                raise DatasetFormatError("image values must lie in [0, 1]")

    # -- views ---------------------------------------------------------

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def items(self) -> Iterator[tuple[np.ndarray, int, Optional[str]]]:
        for i in range(self.n):
            yield self.images[i], int(self.labels[i]), self.mark_ids[i]

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            mark_ids=[self.mark_ids[i] for i in idx],
            num_classes=self.num_classes,
            split=self.split,
            norm_mean=self.norm_mean.copy(),
            norm_std=self.norm_std.copy(),
        )

    def without_class(self, label: int) -> "LabeledDataset":
        return self.subset(np.nonzero(self.labels != label)[0])

    def with_norm_stats(self, mean: np.ndarray, std: np.ndarray) -> "LabeledDataset":
        out = replace(self)
        out.norm_mean = np.asarray(mean, dtype=np.float64).copy()
        out.norm_std = np.asarray(std, dtype=np.float64).copy()
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.split == other.split
            and self.mark_ids == other.mark_ids
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.norm_mean, other.norm_mean)
            and np.array_equal(self.norm_std, other.norm_std)
        )


def compute_norm_stats(dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over all images, std floored away from zero."""
    flat = dataset.images.astype(np.float64).transpose(1, 0, 2, 3).reshape(dataset.dims[0], -1)
    mean = flat.mean(axis=1)
    std = np.maximum(flat.std(axis=1), 1e-6)
    return mean, std


# -- synthetic data ------------------------------------------------------

# Class structure constants.  Each class is a small family of smooth
# base patterns (modes); every image draws one mode plus a per-image
# smooth clutter field and pixel noise.  The clutter keeps the task from
# saturating (so secondary features stay worth learning) while leaving
# the classes separable enough for a small CNN to clear 90% accuracy.
_PATTERN_GRID = 4
_PATTERN_AMPLITUDE = 0.32
_MODES_PER_CLASS = 3
_CLUTTER_AMPLITUDE = 0.35
_IMAGE_NOISE_SIGMA = 0.15


def _smooth_field(dims: tuple[int, int, int], gen: np.random.Generator,
                  grid: int = _PATTERN_GRID) -> np.ndarray:
    """Bilinearly upsampled coarse random field in [-1, 1], one per channel."""
    c, h, w = dims
    coarse = gen.uniform(-1.0, 1.0, size=(c, grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    y0 = np.minimum(ys.astype(int), grid - 2)
    x0 = np.minimum(xs.astype(int), grid - 2)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    tl = coarse[:, y0][:, :, x0]
    tr = coarse[:, y0][:, :, x0 + 1]
    bl = coarse[:, y0 + 1][:, :, x0]
    br = coarse[:, y0 + 1][:, :, x0 + 1]
    return (tl * (1 - wy) * (1 - wx) + tr * (1 - wy) * wx
            + bl * wy * (1 - wx) + br * wy * wx)


def class_patterns(dims: tuple[int, int, int], rng: Rng,
                   num_classes: int) -> list[list[np.ndarray]]:
    """Noiseless base patterns per class, ``_MODES_PER_CLASS`` modes each."""
    gen = rng.generator(_SUB_PATTERNS)
    return [
        [
            np.clip(0.5 + _PATTERN_AMPLITUDE * _smooth_field(dims, gen), 0.05, 0.95)
            for _ in range(_MODES_PER_CLASS)
        ]
        for _ in range(num_classes)
    ]


def generate_synthetic_dataset(
    num_classes: int,
    per_class: int,
    dims: tuple[int, int, int],
    rng: Rng,
    split: str = "train",
) -> LabeledDataset:
    """Desk-scale stand-in for a benchmark task.

    Classes are linearly-plus-texture separable (class base patterns plus
    per-image clutter and noise), so a small CNN reaches >=90% test
    accuracy.  Class patterns depend only on the rng seed, not on the
    split, so train and test splits generated from the same rng describe
    the same task.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 10:
        raise ValueError("need at least 10 images per class")
    c, h, w = dims
    if h < 8 or w < 8:
        raise ValueError(f"dims too small: {dims} (min 8x8)")
    if split not in _SPLITS:
        raise ValueError(f"split must be one of {_SPLITS}")

    patterns = class_patterns(dims, rng, num_classes)
    image_gen = rng.generator(_SUB_TRAIN_IMAGES if split == "train" else _SUB_TEST_IMAGES)

    n = num_classes * per_class
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for label in range(num_classes):
        for _ in range(per_class):
            mode = int(image_gen.integers(0, _MODES_PER_CLASS))
            img = (
                patterns[label][mode]
                + _CLUTTER_AMPLITUDE * _smooth_field(dims, image_gen)
                + image_gen.normal(0.0, _IMAGE_NOISE_SIGMA, size=dims)
            )
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = label
            i += 1

    return LabeledDataset(
        images=images,
        labels=labels,
        mark_ids=[None] * n,
        num_classes=num_classes,
        split=split,
    )


# -- augmentation --------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    """Training-time augmentation: flip, crop, rotate, then normalize.

    The order is fixed so training is deterministic; normalization always
    runs last and uses the per-channel statistics carried here (typically
    the training manifest's).
    """

    flip_prob: float = 0.0
    crop_padding: int = 0
    rotation_degrees: float = 0.0
    norm_mean: tuple[float, ...] = ()
    norm_std: tuple[float, ...] = ()

    @staticmethod
    def for_dataset(
        dataset: LabeledDataset,
        flip_prob: float = 0.5,
        crop_padding: int = 2,
        rotation_degrees: float = 10.0,
    ) -> "AugmentationPolicy":
        return AugmentationPolicy(
            flip_prob=flip_prob,
            crop_padding=crop_padding,
            rotation_degrees=rotation_degrees,
            norm_mean=tuple(float(v) for v in dataset.norm_mean),
            norm_std=tuple(float(v) for v in dataset.norm_std),
        )

    def effective_stats(self, channels: int) -> tuple[np.ndarray, np.ndarray]:
        """Normalization stats, defaulting to identity when unset."""
        if not self.norm_mean and not self.norm_std:
            return np.zeros(channels), np.ones(channels)
        if len(self.norm_mean) != channels or len(self.norm_std) != channels:
            raise ValueError(
                f"policy normalization stats have wrong channel count "
                f"({len(self.norm_mean)}/{len(self.norm_std)} for {channels} channels)"
            )
        return np.asarray(self.norm_mean, dtype=np.float64), np.asarray(
            self.norm_std, dtype=np.float64
        )


_grid_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _centered_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    key = (h, w)
    if key not in _grid_cache:
        yy, xx = np.meshgrid(
            np.arange(h, dtype=np.float64) - (h - 1) / 2.0,
            np.arange(w, dtype=np.float64) - (w - 1) / 2.0,
            indexing="ij",
        )
        _grid_cache[key] = (yy, xx)
    return _grid_cache[key]


def _rotate_batch(images: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    """Rotate each image about its center, bilinear sampling, zero outside.

    Sampling goes through a one-pixel zero ring; any source coordinate
    outside the image clips into the ring and contributes exactly zero.
    """
    b, c, h, w = images.shape
    yy, xx = _centered_grid(h, w)
    th = np.radians(np.asarray(degrees, dtype=np.float64))[:, None, None]
    cos_t, sin_t = np.cos(th), np.sin(th)
    sy = cos_t * yy + sin_t * xx + (h - 1) / 2.0
    sx = -sin_t * yy + cos_t * xx + (w - 1) / 2.0
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = (sy - y0).astype(np.float32)[..., None]
    wx = (sx - x0).astype(np.float32)[..., None]

    padded = np.zeros((b, h + 2, w + 2, c), dtype=np.float32)
    padded[:, 1:-1, 1:-1, :] = images.transpose(0, 2, 3, 1)
    bidx = np.arange(b)[:, None, None]

    def gather(yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return padded[bidx, np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)]

    out = (
        gather(y0, x0) * (1 - wy) * (1 - wx)
        + gather(y0, x0 + 1) * (1 - wy) * wx
        + gather(y0 + 1, x0) * wy * (1 - wx)
        + gather(y0 + 1, x0 + 1) * wy * wx
    )
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _augment_core(images: np.ndarray, policy: AugmentationPolicy,
                  gen: np.random.Generator) -> np.ndarray:
    """flip -> crop -> rotate on a (B, C, H, W) batch, pre-normalization."""
    b, c, h, w = images.shape
    out = np.asarray(images, dtype=np.float32)
    flips = gen.random(b) < policy.flip_prob
    if flips.any():
        out = out.copy()
        out[flips] = out[flips][:, :, :, ::-1]
    if policy.crop_padding > 0:
        p = policy.crop_padding
        padded = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=np.float32)
        padded[:, p : p + h, p : p + w, :] = out.transpose(0, 2, 3, 1)
        off = gen.integers(0, 2 * p + 1, size=(b, 2))
        iy = off[:, 0][:, None, None] + np.arange(h)[None, :, None]
        ix = off[:, 1][:, None, None] + np.arange(w)[None, None, :]
        out = padded[np.arange(b)[:, None, None], iy, ix].transpose(0, 3, 1, 2)
    if policy.rotation_degrees > 0:
        angles = gen.uniform(-policy.rotation_degrees, policy.rotation_degrees, size=b)
        out = _rotate_batch(np.ascontiguousarray(out), angles)
    return np.ascontiguousarray(out, dtype=np.float32)


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """Per-channel (x - mean) / std; accepts a single image or a batch."""
    m = np.asarray(mean, dtype=np.float32)
    s = np.asarray(std, dtype=np.float32)
    if images.ndim == 3:
        return (images - m[:, None, None]) / s[:, None, None]
    return (images - m[None, :, None, None]) / s[None, :, None, None]


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: Rng) -> np.ndarray:
    """Apply the policy to one image: flip -> crop -> rotate -> normalize.

    The result has the same dims as the input but, being normalized, is no
    longer confined to [0, 1]; it is the tensor the network consumes.
    """
    check_image(image)
    return augment_batch(np.asarray(image, dtype=np.float32)[None], policy,
                         rng.generator())[0]


def augment_batch(images: np.ndarray, policy: AugmentationPolicy,
                  gen: np.random.Generator) -> np.ndarray:
    """Batch counterpart of :func:`augment`.

    Random draws happen stage by stage (all flips, then all crop offsets,
    then all angles), so the output is deterministic given the generator
    state.
    """
    out = _augment_core(images, policy, gen)
    mean, std = policy.effective_stats(images.shape[1])
    return normalize(out, mean, std)


# -- persistence ---------------------------------------------------------


def save_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    """Write ``manifest.json`` + ``data.bin`` into the directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_classes": dataset.num_classes,
        "dims": list(dataset.dims),
        "norm_mean": [float(v) for v in dataset.norm_mean],
        "norm_std": [float(v) for v in dataset.norm_std],
        "items": [
            {"label": int(label), "mark_id": mark_id}
            for label, mark_id in zip(dataset.labels, dataset.mark_ids)
        ],
        "split": dataset.split,
    }
    (root / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    payload = np.ascontiguousarray(dataset.images, dtype="<f4")
    (root / "data.bin").write_bytes(payload.tobytes())


def load_dataset(path: str | Path) -> LabeledDataset:
    """Inverse of :func:`save_dataset`; validates manifest against payload."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read manifest: {exc}") from exc
    try:
        num_classes = int(manifest["num_classes"])
        dims = tuple(int(v) for v in manifest["dims"])
        norm_mean = np.asarray(manifest["norm_mean"], dtype=np.float64)
        norm_std = np.asarray(manifest["norm_std"], dtype=np.float64)
        items = manifest["items"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"manifest missing or malformed field: {exc}") from exc
    if len(dims) != 3:
        raise DatasetFormatError(f"dims must have 3 entries, got {manifest['dims']}")

    raw = (root / "data.bin").read_bytes()
    n = len(items)
    expected = n * int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise DatasetFormatError(
            f"payload size {len(raw)} does not match manifest "
            f"({n} items of dims {dims} need {expected} bytes)"
        )
    images = np.frombuffer(raw, dtype="<f4").reshape((n, *dims)).copy()
    labels = np.array([int(item["label"]) for item in items], dtype=np.int64)
    mark_ids = [item.get("mark_id") for item in items]
    return LabeledDataset(
        images=images,
        labels=labels,
        mark_ids=mark_ids,
        num_classes=num_classes,
        split=manifest.get("split", "train"),
        norm_mean=norm_mean,
        norm_std=norm_std,
    )
