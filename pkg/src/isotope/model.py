"""A small configurable CNN classifier with a deterministic numpy engine.

The network is conv3x3/relu/maxpool blocks followed by dense layers, with
softmax probabilities computed in float64 at the output surface.  The
forward/backward core is functional (params dict in, grads dict out) so
the trainer can run it in float32 for speed and the gradient checker in
float64.

Query access goes through endpoint objects exposing ``query(images) ->
QueryOutput``; wrappers reproduce deployment-side output transforms
(top-K truncation, logit noise) without touching the underlying weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imgdata import Rng, normalize

_MAGIC = b"ISOTOPE-MODEL-1\n"


@dataclass(frozen=True)
class Architecture:
    """Layer plan: one conv3x3(pad 1)+relu+maxpool2 block per conv entry,
    then flatten, hidden dense+relu layers, and a final dense to logits."""

    input_dims: tuple[int, int, int] = (3, 32, 32)
    conv_channels: tuple[int, ...] = (16, 32)
    dense_units: tuple[int, ...] = (128,)
    num_classes: int = 10

    def __post_init__(self) -> None:
        c, h, w = self.input_dims
        factor = 2 ** len(self.conv_channels)
        if h % factor or w % factor:
            raise ValueError(
                f"input {h}x{w} must be divisible by {factor} for {len(self.conv_channels)} pools"
            )
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def layer_names(self) -> list[str]:
        """Trainable layers in freeze order (inputs first)."""
        convs = [f"conv{i}" for i in range(len(self.conv_channels))]
        denses = [f"dense{j}" for j in range(len(self.dense_units) + 1)]
        return convs + denses

    @property
    def flat_size(self) -> int:
        c, h, w = self.input_dims
        factor = 2 ** len(self.conv_channels)
        out_c = self.conv_channels[-1] if self.conv_channels else c
        return out_c * (h // factor) * (w // factor)

    def feature_layers(self) -> list[str]:
        """Valid taps for feature extraction: flatten plus hidden denses."""
        return ["flatten"] + [f"dense{j}" for j in range(len(self.dense_units))]

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "conv_channels": list(self.conv_channels),
            "dense_units": list(self.dense_units),
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(doc: dict) -> "Architecture":
        return Architecture(
            input_dims=tuple(doc["input_dims"]),
            conv_channels=tuple(doc["conv_channels"]),
            dense_units=tuple(doc["dense_units"]),
            num_classes=int(doc["num_classes"]),
        )


# -- functional engine ---------------------------------------------------


def _conv3x3(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]):
    """Same-size 3x3 convolution via im2col; returns output and columns."""
    bsz, c, h, wd = x.shape
    out_c = w.shape[0]
    xp = np.zeros((bsz, c, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(bsz, c * 9, h * wd)
    out = np.matmul(w.reshape(out_c, c * 9), cols)  # (B, O, H*W)
    if b is not None:
        out += b[None, :, None]
    return out.reshape(bsz, out_c, h, wd), cols


def _conv3x3_input_grad(dout: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Gradient w.r.t. the input is a same-size conv of dout with the
    # kernel flipped and its channel axes swapped.
    w_back = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _conv3x3(dout, w_back, None)
    return dx


def _maxpool2(x: np.ndarray):
    bsz, c, h, w = x.shape
    xr = (
        x.reshape(bsz, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, c, h // 2, w // 2, 4)
    )
    idx = xr.argmax(axis=-1)  # ties go to the first element: deterministic
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    bsz, c, h2, w2 = dout.shape
    g = np.zeros((bsz, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    return (
        g.reshape(bsz, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)
    )


def net_forward(params: dict, arch: Architecture, x: np.ndarray,
                with_cache: bool = False):
    """Run the network on normalized input; returns (logits, cache).

    ``cache`` holds intermediate activations keyed for the backward pass
    plus the feature taps (``flatten``, ``dense{j}`` post-relu).
    """
    cache: dict = {"input": x}
    a = x
    for i in range(len(arch.conv_channels)):
        z, cols = _conv3x3(a, params[f"conv{i}_W"], params[f"conv{i}_b"])
        r = np.maximum(z, 0)
        a, idx = _maxpool2(r)
        if with_cache:
            cache[f"conv{i}_cols"] = cols
            cache[f"conv{i}_z"] = z
            cache[f"conv{i}_pool_idx"] = idx
            cache[f"conv{i}_pool_in_shape"] = r.shape
    a = a.reshape(a.shape[0], -1)
    cache["flatten"] = a
    for j in range(len(arch.dense_units)):
        z = a @ params[f"dense{j}_W"].T + params[f"dense{j}_b"]
        if with_cache:
            cache[f"dense{j}_in"] = a
            cache[f"dense{j}_z"] = z
        a = np.maximum(z, 0)
        cache[f"dense{j}"] = a
    out_name = f"dense{len(arch.dense_units)}"
    logits = a @ params[f"{out_name}_W"].T + params[f"{out_name}_b"]
    if with_cache:
        cache[f"{out_name}_in"] = a
    return logits, cache


def net_backward(params: dict, arch: Architecture, cache: dict,
                 dlogits: np.ndarray) -> dict:
    """Gradients of the loss w.r.t. every parameter, given dL/dlogits."""
    grads: dict = {}
    out_name = f"dense{len(arch.dense_units)}"
    da = dlogits
    grads[f"{out_name}_W"] = da.T @ cache[f"{out_name}_in"]
    grads[f"{out_name}_b"] = da.sum(axis=0)
    da = da @ params[f"{out_name}_W"]
    for j in reversed(range(len(arch.dense_units))):
        da = da * (cache[f"dense{j}_z"] > 0)
        grads[f"dense{j}_W"] = da.T @ cache[f"dense{j}_in"]
        grads[f"dense{j}_b"] = da.sum(axis=0)
        da = da @ params[f"dense{j}_W"]
    n_conv = len(arch.conv_channels)
    bsz = dlogits.shape[0]
    _, h, w = arch.input_dims
    factor = 2 ** n_conv
    if n_conv:
        # fold the flat gradient back to the last pooled activation shape
        da = da.reshape(bsz, arch.conv_channels[-1], h // factor, w // factor)
    for i in reversed(range(n_conv)):
        dpool_in = _maxpool2_backward(da, cache[f"conv{i}_pool_idx"],
                                      cache[f"conv{i}_pool_in_shape"])
        dz = dpool_in * (cache[f"conv{i}_z"] > 0)
        out_c = params[f"conv{i}_W"].shape[0]
        dz_flat = dz.reshape(bsz, out_c, -1)
        dw = np.matmul(dz_flat, cache[f"conv{i}_cols"].transpose(0, 2, 1)).sum(axis=0)
        grads[f"conv{i}_W"] = dw.reshape(params[f"conv{i}_W"].shape)
        grads[f"conv{i}_b"] = dz_flat.sum(axis=(0, 2))
        if i > 0:
            da = _conv3x3_input_grad(dz, params[f"conv{i}_W"])
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax in float64, rows summing to 1."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- classifier ----------------------------------------------------------


@dataclass
class Classifier:
    """Weights plus the preprocessing statistics they were trained with.

    ``forward`` takes raw [0, 1] images and normalizes them internally, so
    in-process queries and remote queries see the same preprocessing.
    """

    arch: Architecture
    params: dict
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        c = self.arch.input_dims[0]
        mean = np.asarray(self.norm_mean, dtype=np.float64)
        std = np.asarray(self.norm_std, dtype=np.float64)
        self.norm_mean = mean if mean.size else np.zeros(c, dtype=np.float64)
        self.norm_std = std if std.size else np.ones(c, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return self.arch.input_dims

    def copy(self) -> "Classifier":
        return Classifier(
            arch=self.arch,
            params={k: v.copy() for k, v in self.params.items()},
            norm_mean=self.norm_mean.copy(),
            norm_std=self.norm_std.copy(),
        )

    def _prepare(self, images: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(images, dtype=np.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.arch.input_dims:
            raise ValueError(
                f"input dims {x.shape[1:]} do not match model input {self.arch.input_dims}"
            )
        return normalize(x, self.norm_mean, self.norm_std), single

    def forward_logits(self, images: np.ndarray) -> np.ndarray:
        x, single = self._prepare(images)
        logits, _ = net_forward(self.params, self.arch, x)
        logits = logits.astype(np.float64)
        return logits[0] if single else logits

    def forward(self, images: np.ndarray) -> np.ndarray:
        """Normalized probability vectors, one row per image."""
        return softmax(self.forward_logits(images))

    def features_batch(self, images: np.ndarray, layer: str | int = -1) -> np.ndarray:
        taps = self.arch.feature_layers()
        if isinstance(layer, int):
            layer = taps[layer]
        if layer not in taps:
            raise ValueError(f"layer {layer!r} is not a feature boundary; pick from {taps}")
        x, single = self._prepare(images)
        _, cache = net_forward(self.params, self.arch, x, with_cache=True)
        out = cache[layer].astype(np.float64)
        return out[0] if single else out

    def features(self, image: np.ndarray, layer: str | int = -1) -> np.ndarray:
        """Activation vector at a flatten/dense boundary for one image."""
        return self.features_batch(image, layer)


def init_classifier(arch: Architecture, rng: Rng) -> Classifier:
    """He-initialized weights, zero biases; deterministic given rng.

    The output layer starts at zero (uniform logits), which keeps the
    first optimizer steps well-scaled at aggressive learning rates.
    """
    gen = rng.generator()
    params: dict = {}
    in_c = arch.input_dims[0]
    for i, out_c in enumerate(arch.conv_channels):
        fan_in = in_c * 9
        params[f"conv{i}_W"] = gen.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, 3, 3)
        ).astype(np.float32)
        params[f"conv{i}_b"] = np.zeros(out_c, dtype=np.float32)
        in_c = out_c
    fan_in = arch.flat_size
    for j, units in enumerate(arch.dense_units):
        params[f"dense{j}_W"] = gen.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(units, fan_in)
        ).astype(np.float32)
        params[f"dense{j}_b"] = np.zeros(units, dtype=np.float32)
        fan_in = units
    out_name = f"dense{len(arch.dense_units)}"
    params[f"{out_name}_W"] = np.zeros((arch.num_classes, fan_in), dtype=np.float32)
    params[f"{out_name}_b"] = np.zeros(arch.num_classes, dtype=np.float32)
    return Classifier(arch=arch, params=params)


def save_model(model: Classifier, path: str | Path) -> None:
    """JSON header (architecture, norm stats, layer order) + raw f32 blob."""
    order = []
    blobs = []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        order.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {
            "arch": model.arch.to_dict(),
            "norm_mean": [float(v) for v in model.norm_mean],
            "norm_std": [float(v) for v in model.norm_std],
            "params": order,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_model(path: str | Path) -> Classifier:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path} is not a model file")
    off = len(_MAGIC)
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        params[entry["name"]] = (
            np.frombuffer(raw[off : off + count * 4], dtype="<f4").reshape(shape).copy()
        )
        off += count * 4
    return Classifier(
        arch=Architecture.from_dict(header["arch"]),
        params=params,
        norm_mean=np.asarray(header["norm_mean"], dtype=np.float64),
        norm_std=np.asarray(header["norm_std"], dtype=np.float64),
    )


# -- query endpoints -------------------------------------------------------


@dataclass
class QueryOutput:
    """Either full probability rows or per-image top-K (label, rank) lists."""

    probs: Optional[np.ndarray] = None
    topk: Optional[list[list[tuple[int, int]]]] = None

    @property
    def mode(self) -> str:
        return "probs" if self.probs is not None else "topk"

    def __len__(self) -> int:
        return self.probs.shape[0] if self.probs is not None else len(self.topk)


def rank_of(output: np.ndarray | Sequence[tuple[int, int]], label: int) -> int:
    """1-based rank of ``label``.

    For a probability vector: position in the descending sort, ties broken
    by ascending label index.  For a top-K (label, rank) list: the listed
    rank, or K+1 when the label is absent.
    """
    if isinstance(output, np.ndarray):
        order = np.argsort(-output, kind="stable")
        return int(np.nonzero(order == label)[0][0]) + 1
    for lab, rank in output:
        if lab == label:
            return int(rank)
    return len(output) + 1


def ranks_for_label(output: QueryOutput, label: int) -> np.ndarray:
    """Vector of ranks of ``label`` across a batch output."""
    if output.probs is not None:
        order = np.argsort(-output.probs, axis=1, kind="stable")
        return (order == label).argmax(axis=1) + 1
    return np.array([rank_of(row, label) for row in output.topk], dtype=np.int64)


class ModelEndpoint:
    """In-process query endpoint returning full probability vectors."""

    mode = "probs"

    def __init__(self, model: Classifier):
        self.model = model
        self.num_classes = model.num_classes
        self.input_dims = model.input_dims

    def query(self, images: np.ndarray) -> QueryOutput:
        return QueryOutput(probs=np.atleast_2d(self.model.forward(images)))


class LogitNoiseEndpoint:
    """Adds N(0, sigma) noise to the logits before the softmax.

    sigma = 0 reproduces the unwrapped model bit for bit.
    """

    mode = "probs"

    def __init__(self, model: Classifier, sigma: float, rng: Rng):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.model = model
        self.sigma = float(sigma)
        self.rng = rng
        self._gen = rng.generator()
        self.num_classes = model.num_classes
        self.input_dims = model.input_dims

    def with_seed(self, seed: int) -> "LogitNoiseEndpoint":
        return LogitNoiseEndpoint(self.model, self.sigma, Rng(seed))

    def query(self, images: np.ndarray) -> QueryOutput:
        logits = np.atleast_2d(self.model.forward_logits(images))
        if self.sigma > 0:
            logits = logits + self.sigma * self._gen.standard_normal(logits.shape)
        return QueryOutput(probs=softmax(logits))


class TopKEndpoint:
    """Truncates a probability endpoint to its top-K ranked classes.

    The optional confidence ``threshold`` maps the "all labels above
    threshold" API style onto the same contract: entries below it are cut
    from the list, and absent labels take rank len(list)+1.
    """

    mode = "topk"

    def __init__(self, base, k: int, threshold: Optional[float] = None):
        base = as_endpoint(base)
        if base.mode != "probs":
            raise ValueError("top-K wrapper needs a probability endpoint underneath")
        if not 1 <= k <= base.num_classes:
            raise ValueError(f"K must be in [1, {base.num_classes}], got {k}")
        self.base = base
        self.k = int(k)
        self.threshold = threshold
        self.num_classes = base.num_classes
        self.input_dims = getattr(base, "input_dims", None)

    def query(self, images: np.ndarray) -> QueryOutput:
        probs = self.base.query(images).probs
        order = np.argsort(-probs, axis=1, kind="stable")[:, : self.k]
        topk = []
        for i, row in enumerate(order):
            entries = [(int(lab), r + 1) for r, lab in enumerate(row)]
            if self.threshold is not None:
                entries = [
                    (lab, rank)
                    for lab, rank in entries
                    if probs[i, lab] >= self.threshold
                ]
            topk.append(entries)
        return QueryOutput(topk=topk)


def wrap_topk(model_or_endpoint, k: int, threshold: Optional[float] = None) -> TopKEndpoint:
    return TopKEndpoint(model_or_endpoint, k, threshold=threshold)


def wrap_logit_noise(model: Classifier, sigma: float, rng: Rng) -> LogitNoiseEndpoint:
    return LogitNoiseEndpoint(model, sigma, rng)


def as_endpoint(obj) -> object:
    """Coerce a Classifier to its probability endpoint; pass endpoints through."""
    if isinstance(obj, Classifier):
        return ModelEndpoint(obj)
    if hasattr(obj, "query") and hasattr(obj, "mode"):
        return obj
    raise TypeError(f"cannot use {type(obj).__name__} as a query endpoint")
