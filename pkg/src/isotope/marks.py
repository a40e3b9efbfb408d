"""Mark patterns and their insertion into images.

A mark is a pattern/mask/strength triple (t, m, alpha).  Blending follows
the rule ``alpha * t + (1 - alpha) * x`` on masked pixels, leaving pixels
outside the mask bit-identical to the input.  Two pattern families exist:
pixel marks (square or scattered pixels zeroed out, partial mask) and
blend-image marks (a full-image texture).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .imgdata import LabeledDataset, Rng, _smooth_field, check_image

_PIXEL_KINDS = ("pixel_square", "random_pixels")
_KINDS = _PIXEL_KINDS + ("blend_image",)


@dataclass(frozen=True)
class MarkSpec:
    """A spurious-feature mark: pattern t, mask m, and blend strength alpha."""

    id: str
    kind: str
    pattern: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (C, H, W) bool
    alpha: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "pattern", np.ascontiguousarray(self.pattern, dtype=np.float32))
        object.__setattr__(self, "mask", np.ascontiguousarray(self.mask, dtype=bool))
        if self.kind not in _KINDS:
            raise ValueError(f"unknown mark kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mask.shape != self.pattern.shape:
            raise ValueError("mask dims must match pattern dims")
        check_image(self.pattern)
        if self.kind in _PIXEL_KINDS and np.any(self.pattern[self.mask] != 0.0):
            raise ValueError("pixel marks must zero out their masked pixels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.pattern.shape)  # type: ignore[return-value]

    def with_alpha(self, alpha: float) -> "MarkSpec":
        return replace(self, alpha=alpha)


@dataclass(frozen=True)
class IsotopePlan:
    """Which mark goes into which class, and how much of it.

    Exactly one of ``fraction`` (p) and ``count`` (k) is given; p converts
    to k by round-half-up and must select at least one image.
    """

    mark: MarkSpec
    target_class: int
    rng: Rng
    fraction: Optional[float] = None
    count: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.fraction is None) == (self.count is None):
            raise ValueError("give exactly one of fraction or count")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.count is not None and self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")


def _blend_texture(dims: tuple[int, int, int], gen: np.random.Generator) -> np.ndarray:
    # Three octaves: coarse structure plus fine detail well above the
    # synthetic tasks' spatial frequencies, so blend marks carry features
    # the classes themselves never exhibit.  Independently drawn textures
    # land far apart in L-infinity distance.
    texture = (
        0.5
        + 0.20 * _smooth_field(dims, gen, grid=3)
        + 0.18 * _smooth_field(dims, gen, grid=8)
        + 0.24 * _smooth_field(dims, gen, grid=16)
    )
    return np.clip(texture, 0.0, 1.0).astype(np.float32)


def make_mark(
    kind: str,
    dims: tuple[int, int, int],
    rng: Rng,
    *,
    alpha: float = 0.4,
    square_size: int = 4,
    top: int = 0,
    left: int = 0,
    count: int = 10,
    source: Optional[np.ndarray] = None,
    mark_id: Optional[str] = None,
) -> MarkSpec:
    """Create a mark of the given kind for images of shape ``dims``.

    pixel_square / random_pixels zero out the selected pixels (pattern 0
    on a partial mask); blend_image uses a full-image texture, either the
    given ``source`` image or one generated from ``rng``.
    """
    c, h, w = dims
    if kind == "pixel_square":
        if top < 0 or left < 0 or top + square_size > h or left + square_size > w:
            raise ValueError(
                f"square of size {square_size} at ({top}, {left}) exceeds {h}x{w} image"
            )
        mask = np.zeros(dims, dtype=bool)
        mask[:, top : top + square_size, left : left + square_size] = True
        pattern = np.zeros(dims, dtype=np.float32)
        default_id = f"square{square_size}@{top},{left}-s{rng.seed}.{rng.stream}"
    elif kind == "random_pixels":
        gen = rng.generator()
        if count < 1 or count > h * w:
            raise ValueError(f"pixel count {count} out of range for {h}x{w} image")
        flat = gen.choice(h * w, size=count, replace=False)
        mask = np.zeros(dims, dtype=bool)
        mask[:, flat // w, flat % w] = True
        pattern = np.zeros(dims, dtype=np.float32)
        default_id = f"pixels{count}-s{rng.seed}.{rng.stream}"
    elif kind == "blend_image":
        pattern = (
            np.asarray(check_image(source, dims), dtype=np.float32)
            if source is not None
            else _blend_texture(dims, rng.generator())
        )
        mask = np.ones(dims, dtype=bool)
        default_id = f"blend-s{rng.seed}.{rng.stream}"
    else:
        raise ValueError(f"unknown mark kind {kind!r}")
    return MarkSpec(
        id=mark_id or default_id, kind=kind, pattern=pattern, mask=mask, alpha=alpha
    )


def insert_mark(image: np.ndarray, mark: MarkSpec) -> np.ndarray:
    """Blend the mark into one image: masked pixels become
    ``alpha * t + (1 - alpha) * x``, the rest stay bit-identical."""
    x = np.asarray(image, dtype=np.float32)
    if x.shape != mark.pattern.shape:
        raise ValueError(f"image dims {x.shape} do not match mark dims {mark.pattern.shape}")
    out = x.copy()
    m = mark.mask
    blended = mark.alpha * mark.pattern[m] + (1.0 - mark.alpha) * x[m]
    # blend of unit-interval values stays in [0, 1]; clamp guards float error
    out[m] = np.clip(blended, 0.0, 1.0)
    return out


def insert_mark_batch(images: np.ndarray, mark: MarkSpec) -> np.ndarray:
    """Vectorized :func:`insert_mark` over a (B, C, H, W) batch."""
    x = np.asarray(images, dtype=np.float32)
    if x.shape[1:] != mark.pattern.shape:
        raise ValueError(f"batch dims {x.shape[1:]} do not match mark dims {mark.pattern.shape}")
    out = x.copy()
    m = mark.mask
    blended = mark.alpha * mark.pattern[m][None, :] + (1.0 - mark.alpha) * x[:, m]
    out[:, m] = np.clip(blended, 0.0, 1.0)
    return out


def resolve_count(plan: IsotopePlan, class_size: int) -> int:
    """p -> k conversion: round-half-up, at least 1 image when p > 0."""
    if plan.count is not None:
        if plan.count > class_size:
            raise ValueError(f"count {plan.count} exceeds class size {class_size}")
        return plan.count
    p = plan.fraction
    assert p is not None
    if p == 0.0:
        return 0
    if p * class_size < 1.0:
        raise ValueError(
            f"fraction {p} of class size {class_size} selects less than one image"
        )
    return max(1, int(np.floor(p * class_size + 0.5)))


def apply_plan(dataset: LabeledDataset, plan: IsotopePlan) -> LabeledDataset:
    """Replace k images of the target class with marked versions.

    Selection is deterministic given the plan's rng; every other item is
    untouched.  Marked items carry the mark's id in ``mark_ids``.
    """
    idx = dataset.class_indices(plan.target_class)
    if idx.size == 0:
        raise ValueError(f"dataset has no images of class {plan.target_class}")
    k = resolve_count(plan, idx.size)
    if k == 0:
        return dataset
    chosen = np.sort(plan.rng.generator().choice(idx, size=k, replace=False))
    images = dataset.images.copy()
    images[chosen] = insert_mark_batch(dataset.images[chosen], plan.mark)
    mark_ids = list(dataset.mark_ids)
    for i in chosen:
        mark_ids[int(i)] = plan.mark.id
    return LabeledDataset(
        images=images,
        labels=dataset.labels.copy(),
        mark_ids=mark_ids,
        num_classes=dataset.num_classes,
        split=dataset.split,
        norm_mean=dataset.norm_mean.copy(),
        norm_std=dataset.norm_std.copy(),
    )


def _require_full_mask(mark: MarkSpec, name: str) -> None:
    if not mark.mask.all():
        raise ValueError(f"{name} must have a full mask for interpolation/distance")


def mark_interpolate(t1: MarkSpec, t2: MarkSpec, ratio: float) -> MarkSpec:
    """Blend two full-mask patterns: ``ratio * t1 + (1 - ratio) * t2``.

    Sliding ratio toward 1 yields marks at controlled L-infinity distance
    from t1, which is how mark-similarity studies craft near-collisions.
    """
    if t1.dims != t2.dims:
        raise ValueError("marks must share dims")
    _require_full_mask(t1, "t1")
    _require_full_mask(t2, "t2")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    pattern = ratio * t1.pattern.astype(np.float64) + (1.0 - ratio) * t2.pattern
    return MarkSpec(
        id=f"interp{ratio:g}({t1.id},{t2.id})",
        kind="blend_image",
        pattern=pattern.astype(np.float32),
        mask=np.ones(t1.dims, dtype=bool),
        alpha=t1.alpha,
    )


def mark_linf_distance(t1: MarkSpec, t2: MarkSpec) -> float:
    """Normalized L-infinity distance between two full-mask patterns.

    Patterns live in [0, 1], so the max absolute pixel difference is
    already normalized to [0, 1].
    """
    if t1.dims != t2.dims:
        raise ValueError("marks must share dims")
    _require_full_mask(t1, "t1")
    _require_full_mask(t2, "t2")
    return float(
        np.max(np.abs(t1.pattern.astype(np.float64) - t2.pattern.astype(np.float64)))
    )


# -- persistence ---------------------------------------------------------


def _mask_to_runs(mask: np.ndarray) -> list[int]:
    """Run-length encode a boolean array; runs alternate starting at False."""
    flat = mask.ravel()
    runs: list[int] = []
    current = False
    length = 0
    for v in flat:
        if bool(v) == current:
            length += 1
        else:
            runs.append(length)
            current = not current
            length = 1
    runs.append(length)
    return runs


def _runs_to_mask(runs: list[int], size: int) -> np.ndarray:
    flat = np.empty(size, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        flat[pos : pos + run] = value
        pos += run
        value = not value
    if pos != size:
        raise ValueError(f"mask runs cover {pos} pixels, expected {size}")
    return flat


def save_mark(mark: MarkSpec, path: str | Path) -> None:
    doc = {
        "id": mark.id,
        "kind": mark.kind,
        "alpha": mark.alpha,
        "dims": list(mark.dims),
        "mask": _mask_to_runs(mark.mask),
        "pattern": base64.b64encode(
            np.ascontiguousarray(mark.pattern, dtype="<f4").tobytes()
        ).decode("ascii"),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_mark(path: str | Path) -> MarkSpec:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    dims = tuple(int(v) for v in doc["dims"])
    size = int(np.prod(dims))
    raw = base64.b64decode(doc["pattern"])
    if len(raw) != size * 4:
        raise ValueError(f"pattern payload has {len(raw)} bytes, expected {size * 4}")
    pattern = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    mask = _runs_to_mask([int(r) for r in doc["mask"]], size).reshape(dims)
    return MarkSpec(
        id=doc["id"], kind=doc["kind"], pattern=pattern, mask=mask, alpha=float(doc["alpha"])
    )
