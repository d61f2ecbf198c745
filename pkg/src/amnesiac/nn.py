"""Small deterministic feed-forward networks.

Parameters live on a fixed-point grid (multiples of ``GRID``, magnitude below
``PARAM_LIMIT``) stored as float32. Every value on that grid has at most 24
significant bits, so float32 addition and subtraction of parameters and
deltas is exact. That is what makes per-batch update journaling reversible:
``theta_initial + sum(deltas) == theta_final`` holds bit for bit, in any order.
"""

from __future__ import annotations

import hashlib
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from amnesiac._rng import generator

GRID_BITS = 20
GRID = 2.0**-GRID_BITS
PARAM_LIMIT = 16.0

DTYPE = np.float32


class ArchitectureError(ValueError):
    """Malformed architecture or input of the wrong shape."""


class DivergenceError(ArithmeticError):
    """Non-finite gradients, or parameters leaving the representable grid."""


# --------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    def __str__(self) -> str:
        return f"dense({self.n_in},{self.n_out})"


@dataclass(frozen=True)
class Conv:
    ch_in: int
    ch_out: int
    k: int = 3

    def __str__(self) -> str:
        return f"conv({self.ch_in},{self.ch_out},{self.k})"


@dataclass(frozen=True)
class ReLU:
    def __str__(self) -> str:
        return "relu"


@dataclass(frozen=True)
class MaxPool:
    size: int = 2

    def __str__(self) -> str:
        return f"maxpool({self.size})"


@dataclass(frozen=True)
class Flatten:
    def __str__(self) -> str:
        return "flatten"


Layer = Dense | Conv | ReLU | MaxPool | Flatten

_LAYER_RE = re.compile(r"^\s*([a-z]+)\s*(?:\(([^)]*)\))?\s*$")


def _parse_layer(text: str) -> Layer | tuple[int, ...]:
    m = _LAYER_RE.match(text)
    if not m:
        raise ArchitectureError(f"cannot parse layer {text!r}")
    name, args = m.group(1), m.group(2)
    try:
        nums = tuple(int(a) for a in args.split(",")) if args else ()
    except ValueError:
        raise ArchitectureError(f"non-integer argument in {text!r}") from None
    if name == "input":
        return nums
    if name == "dense" and len(nums) == 2:
        return Dense(*nums)
    if name == "conv" and len(nums) in (2, 3):
        return Conv(*nums)
    if name == "relu" and not nums:
        return ReLU()
    if name == "maxpool" and len(nums) <= 1:
        return MaxPool(*nums)
    if name == "flatten" and not nums:
        return Flatten()
    raise ArchitectureError(f"unknown layer {text!r}")


@dataclass(frozen=True)
class Architecture:
    """Input shape plus an ordered tuple of layers.

    The canonical text form (``str(arch)``) is what gets fingerprinted, e.g.
    ``input(784);dense(784,256);relu;dense(256,10)``.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    _shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "_shapes", self._chain())

    @classmethod
    def parse(cls, text: str) -> Architecture:
        parts = [p for p in re.split(r"[;\n]", text) if p.strip()]
        if not parts:
            raise ArchitectureError("empty architecture")
        first = _parse_layer(parts[0])
        if not isinstance(first, tuple):
            raise ArchitectureError("architecture must start with input(...)")
        layers = []
        for p in parts[1:]:
            layer = _parse_layer(p)
            if isinstance(layer, tuple):
                raise ArchitectureError("input(...) may only appear first")
            layers.append(layer)
        return cls(first, tuple(layers))

    @classmethod
    def mlp(cls, *widths: int) -> Architecture:
        """``mlp(784, 256, 128, 10)``: dense layers with ReLU in between."""
        if len(widths) < 2:
            raise ArchitectureError("mlp needs at least input and output widths")
        layers: list[Layer] = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if i:
                layers.append(ReLU())
            layers.append(Dense(a, b))
        return cls((widths[0],), tuple(layers))

    def __str__(self) -> str:
        head = "input(" + ",".join(str(d) for d in self.input_shape) + ")"
        return ";".join([head, *(str(layer) for layer in self.layers)])

    def _chain(self) -> tuple[tuple[int, ...], ...]:
        if not self.input_shape or any(d <= 0 for d in self.input_shape):
            raise ArchitectureError(f"bad input shape {self.input_shape}")
        if not self.layers:
            raise ArchitectureError("architecture has no layers")
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.n_in <= 0 or layer.n_out <= 0:
                    raise ArchitectureError(f"layer {i}: non-positive width")
                if len(shape) != 1 or shape[0] != layer.n_in:
                    raise ArchitectureError(f"layer {i} {layer}: got input shape {shape}")
                shape = (layer.n_out,)
            elif isinstance(layer, Conv):
                if layer.k != 3:
                    raise ArchitectureError(f"layer {i}: only 3x3 kernels are supported")
                if len(shape) != 3 or shape[0] != layer.ch_in:
                    raise ArchitectureError(f"layer {i} {layer}: got input shape {shape}")
                shape = (layer.ch_out, shape[1], shape[2])
            elif isinstance(layer, MaxPool):
                if layer.size != 2:
                    raise ArchitectureError(f"layer {i}: only 2x2 pooling is supported")
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ArchitectureError(f"layer {i} {layer}: got input shape {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ArchitectureError(f"layer {i}: unknown layer type {layer!r}")
            shapes.append(shape)
        if len(shape) != 1:
            raise ArchitectureError(f"output must be a vector, got shape {shape}")
        return tuple(shapes)

    @property
    def output_dim(self) -> int:
        return self._shapes[-1][0]

    def layout(self) -> tuple[tuple[int, tuple[int, ...], tuple[int, ...]], ...]:
        """(layer_id, weight_shape, bias_shape) for every parametrised layer."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                out.append((i, (layer.n_out, layer.n_in), (layer.n_out,)))
            elif isinstance(layer, Conv):
                out.append((i, (layer.ch_out, layer.ch_in, layer.k, layer.k), (layer.ch_out,)))
        return tuple(out)

    def fingerprint(self) -> int:
        digest = hashlib.blake2b(str(self).encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


# --------------------------------------------------------------------------
# parameter containers


def quantize(values: np.ndarray) -> np.ndarray:
    """Round onto the parameter grid, returning float32.

    Raises DivergenceError for non-finite input or anything outside the range
    where the grid is exactly representable in float32.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DivergenceError("non-finite values")
    q = np.rint(v * 2.0**GRID_BITS) * GRID
    if q.size and np.max(np.abs(q)) >= PARAM_LIMIT:
        raise DivergenceError(f"value magnitude reached {PARAM_LIMIT}; grid no longer exact")
    # + 0.0 normalises -0.0
    return q.astype(DTYPE) + DTYPE(0.0)


class ParamVector:
    """Per-layer weights and biases backed by one flat buffer.

    Layer order and shapes come from the architecture layout, so any two
    vectors for the same architecture add and subtract element-wise.
    """

    __slots__ = ("layout", "flat")

    def __init__(self, layout, flat: np.ndarray):
        self.layout = tuple(layout)
        self.flat = np.ascontiguousarray(flat)
        if self.flat.ndim != 1 or self.flat.size != _layout_size(self.layout):
            raise ValueError("flat buffer does not match layout")

    @classmethod
    def zeros(cls, layout, dtype=DTYPE):
        return cls(layout, np.zeros(_layout_size(layout), dtype=dtype))

    @property
    def size(self) -> int:
        return self.flat.size

    def __iter__(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        off = 0
        for layer_id, wshape, bshape in self.layout:
            wn, bn = int(np.prod(wshape)), int(np.prod(bshape))
            w = self.flat[off : off + wn].reshape(wshape)
            b = self.flat[off + wn : off + wn + bn]
            off += wn + bn
            yield layer_id, w, b

    def by_layer(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        return {lid: (w, b) for lid, w, b in self}

    def _check(self, other: ParamVector) -> None:
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")

    def __add__(self, other: ParamVector):
        self._check(other)
        return type(self)(self.layout, self.flat + other.flat)

    def __sub__(self, other: ParamVector):
        self._check(other)
        return type(self)(self.layout, self.flat - other.flat)

    def __neg__(self):
        return type(self)(self.layout, -self.flat + self.flat.dtype.type(0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)

    __hash__ = None  # mutable

    def copy(self):
        return type(self)(self.layout, self.flat.copy())

    def astype(self, dtype):
        return type(self)(self.layout, self.flat.astype(dtype))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(size={self.size}, layers={[l[0] for l in self.layout]})"


class ParamDelta(ParamVector):
    """Additive parameter update; same layout as the model's ParamVector."""


def _layout_size(layout) -> int:
    return sum(int(np.prod(w)) + int(np.prod(b)) for _, w, b in layout)


# --------------------------------------------------------------------------
# model


class Model:
    def __init__(self, architecture: Architecture, params: ParamVector):
        if params.layout != architecture.layout():
            raise ArchitectureError("parameters do not match architecture")
        self.architecture = architecture
        self.params = params

    @property
    def class_count(self) -> int:
        return self.architecture.output_dim

    @property
    def binary(self) -> bool:
        """Single-output models are trained with sigmoid + binary cross-entropy."""
        return self.class_count == 1

    def copy(self) -> Model:
        return Model(self.architecture, self.params.copy())

    def astype(self, dtype) -> Model:
        return Model(self.architecture, self.params.astype(dtype))

    def forward(self, batch) -> np.ndarray:
        return forward(self, batch)

    def predict_proba(self, batch) -> np.ndarray:
        logits = forward(self, batch)
        if self.binary:
            return sigmoid(logits[:, 0])
        return softmax(logits)

    def backward(self, batch, labels):
        return backward(self, batch, labels)

    def __repr__(self) -> str:
        return f"Model({self.architecture})"


def init_model(architecture: Architecture | str, seed: int) -> Model:
    """He-uniform weights, zero biases; each layer drawn from its own
    counter-based stream keyed by (seed, layer_id)."""
    if isinstance(architecture, str):
        architecture = Architecture.parse(architecture)
    layout = architecture.layout()
    params = ParamVector.zeros(layout)
    for layer_id, w, _ in params:
        fan_in = int(np.prod(w.shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        rng = generator(seed, "init", layer_id)
        w[...] = quantize(rng.uniform(-limit, limit, size=w.shape))
    return Model(architecture, params)


# --------------------------------------------------------------------------
# forward / backward


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(model: Model, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=model.params.flat.dtype)
    shape = model.architecture.input_shape
    per = int(np.prod(shape))
    if x.shape == shape or (x.ndim == 1 and x.size == per):
        x = x.reshape(1, per)
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != per:
        raise ArchitectureError(f"batch of shape {x.shape} does not match input {shape}")
    return x.reshape((x.shape[0], *shape))


def _conv_cols(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _conv_cols_backward(dcols: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + w] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def _run(model: Model, x: np.ndarray, keep: bool):
    params = model.params.by_layer()
    caches = []
    for i, layer in enumerate(model.architecture.layers):
        if isinstance(layer, Dense):
            w, b = params[i]
            caches.append(x if keep else None)
            x = x @ w.T + b
        elif isinstance(layer, Conv):
            w, b = params[i]
            n, _, h, wd = x.shape
            cols = _conv_cols(x)
            caches.append((cols, x.shape) if keep else None)
            out = cols @ w.reshape(w.shape[0], -1).T + b
            x = out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2)
        elif isinstance(layer, ReLU):
            mask = x > 0
            caches.append(mask if keep else None)
            x = x * mask
        elif isinstance(layer, MaxPool):
            n, c, h, wd = x.shape
            blocks = x.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            blocks = blocks.reshape(n, c, h // 2, wd // 2, 4)
            arg = blocks.argmax(axis=-1)
            caches.append((arg, x.shape) if keep else None)
            x = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            caches.append(x.shape if keep else None)
            x = x.reshape(x.shape[0], -1)
    return x, caches


def forward(model: Model, batch) -> np.ndarray:
    """Logits of shape [n, class_count]."""
    x = _as_batch(model, batch)
    logits, _ = _run(model, x, keep=False)
    return logits


def _loss_and_dlogits(model: Model, logits: np.ndarray, labels: np.ndarray):
    n = logits.shape[0]
    if model.binary:
        z = logits[:, 0]
        y = labels.astype(logits.dtype)
        # log(1 + exp(-|z|)) + max(z, 0) - y*z
        loss = np.mean(np.logaddexp(0, z) - y * z)
        dz = (sigmoid(z) - y) / n
        return float(loss), dz[:, None].astype(logits.dtype)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])
    d = softmax(logits)
    d[np.arange(n), labels] -= 1
    return float(loss), d / logits.dtype.type(n)


def backward(model: Model, batch, labels):
    """Gradients of the mean cross-entropy over the batch.

    Returns (param_grads, input_grads, loss). Single-output models use
    sigmoid binary cross-entropy; everything else softmax cross-entropy.
    """
    x = _as_batch(model, batch)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("labels and batch differ in length")
    upper = 2 if model.binary else model.class_count
    if labels.size and (labels.min() < 0 or labels.max() >= upper):
        raise ValueError(f"labels must lie in [0, {upper})")
    logits, caches = _run(model, x, keep=True)
    loss, g = _loss_and_dlogits(model, logits, labels)

    grads = ParamDelta.zeros(model.params.layout, dtype=model.params.flat.dtype)
    gl = grads.by_layer()
    params = model.params.by_layer()
    for i in range(len(model.architecture.layers) - 1, -1, -1):
        layer, cache = model.architecture.layers[i], caches[i]
        if isinstance(layer, Dense):
            w, _ = params[i]
            gw, gb = gl[i]
            gw[...] = g.T @ cache
            gb[...] = g.sum(axis=0)
            g = g @ w
        elif isinstance(layer, Conv):
            w, _ = params[i]
            gw, gb = gl[i]
            cols, shape = cache
            n, _, h, wd = shape
            gout = g.transpose(0, 2, 3, 1).reshape(n * h * wd, -1)
            gw[...] = (gout.T @ cols).reshape(gw.shape)
            gb[...] = gout.sum(axis=0)
            g = _conv_cols_backward(gout @ w.reshape(w.shape[0], -1), shape)
        elif isinstance(layer, ReLU):
            g = g * cache
        elif isinstance(layer, MaxPool):
            arg, shape = cache
            n, c, h, wd = shape
            blocks = np.zeros((n, c, h // 2, wd // 2, 4), dtype=g.dtype)
            np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
            g = blocks.reshape(n, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            g = g.reshape(shape)
        elif isinstance(layer, Flatten):
            g = g.reshape(cache)
    return grads, g, loss


def sgd_step(model: Model, param_grads: ParamVector, learning_rate: float) -> ParamDelta:
    """Plain SGD. Returns the exact delta that was added to the parameters."""
    if param_grads.layout != model.params.layout:
        raise ValueError("gradient layout does not match model")
    if not np.all(np.isfinite(param_grads.flat)):
        raise DivergenceError("non-finite gradient")
    step = param_grads.flat.astype(np.float64) * -float(learning_rate)
    delta = ParamDelta(model.params.layout, quantize(step).astype(model.params.flat.dtype))
    new = model.params.flat + delta.flat
    if new.size and np.max(np.abs(new)) >= PARAM_LIMIT:
        raise DivergenceError(f"parameter magnitude reached {PARAM_LIMIT}")
    model.params.flat[...] = new
    return delta


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    batches: int = 0
    wall_time: float = 0.0
    epoch_times: list[float] = field(default_factory=list)


def epoch_order(n: int, config: TrainConfig, epoch: int) -> np.ndarray:
    """Example order for one epoch; a pure function of (seed, epoch)."""
    if not config.shuffle:
        return np.arange(n)
    return generator(config.seed, "shuffle", epoch).permutation(n)


def train(
    model: Model,
    dataset,
    config: TrainConfig,
    journal=None,
    *,
    first_epoch: int = 0,
    on_batch: Callable | None = None,
    on_epoch_end: Callable | None = None,
) -> TrainReport:
    """Run ``config.epochs`` epochs of minibatch SGD on ``dataset``.

    Epochs are numbered from ``first_epoch`` (used both for shuffling and for
    journal keys). The final short batch of each epoch is kept. With a
    journal, each batch's (key, example ids, delta) is recorded before the
    next batch runs. ``on_batch(key, model)`` fires just before a batch is
    applied.
    """
    from amnesiac.journal import BatchKey

    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(first_epoch, first_epoch + config.epochs):
        te = time.perf_counter()
        order = epoch_order(n, config, epoch)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            key = BatchKey(epoch, b)
            if on_batch is not None:
                on_batch(key, model)
            xb, yb = dataset.features[idx], dataset.labels[idx]
            grads, _, loss = backward(model, xb, yb)
            delta = sgd_step(model, grads, config.learning_rate)
            if journal is not None:
                journal.record_batch(key, dataset.ids[idx], delta)
            loss_sum += loss * len(idx)
            report.batches += 1
        report.epoch_times.append(time.perf_counter() - te)  # SGD only, not the accuracy pass
        report.epoch_loss.append(loss_sum / n)
        report.epoch_accuracy.append(_correct(model, dataset.features, dataset.labels) / n)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    report.wall_time = time.perf_counter() - t0
    return report


def predict(model: Model, features: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = []
    for start in range(0, len(features), chunk):
        logits = forward(model, features[start : start + chunk])
        out.append((logits[:, 0] >= 0).astype(np.int64) if model.binary else logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _correct(model: Model, features, labels) -> int:
    return int(np.sum(predict(model, features) == labels))


def accuracy(model: Model, dataset, subset_filter=None) -> float:
    """Fraction of correct argmax predictions over the selected examples.

    ``subset_filter`` is anything with a ``mask(dataset)`` method (see
    ``amnesiac.data.Selector``) or a boolean mask; ``None`` selects all.
    """
    if subset_filter is None:
        mask = np.ones(len(dataset), dtype=bool)
    elif hasattr(subset_filter, "mask"):
        mask = subset_filter.mask(dataset)
    else:
        mask = np.asarray(subset_filter, dtype=bool)
    if not mask.any():
        raise ValueError("accuracy over an empty selection")
    return _correct(model, dataset.features[mask], dataset.labels[mask]) / int(mask.sum())


__all__: Sequence[str] = (
    "Architecture",
    "ArchitectureError",
    "Conv",
    "Dense",
    "DivergenceError",
    "Flatten",
    "MaxPool",
    "Model",
    "ParamDelta",
    "ParamVector",
    "ReLU",
    "TrainConfig",
    "TrainReport",
    "accuracy",
    "backward",
    "forward",
    "init_model",
    "quantize",
    "sgd_step",
    "softmax",
    "train",
)
