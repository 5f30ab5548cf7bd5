"""Plain feed-forward layers, SGD training, neuron-row views, and model I/O.

The parameter view used everywhere downstream treats one neuron as one row:
a Dense neuron's row is its incoming weights with the bias appended, a conv
channel's row is its flattened kernel with the bias appended.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionError,
    DivergenceError,
    FormatError,
    UnsupportedLayerError,
    ValidationError,
)
from .ioutil import atomic_write_bytes
from .tensors import DTYPE, Rng, Tensor

MODEL_MAGIC = b"OTBR"
MODEL_VERSION = 1


@dataclass
class Dense:
    weights: Tensor  # (out, in)
    bias: Tensor  # (out,)


@dataclass
class Conv2D:
    weights: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor  # (out_ch,)
    stride: int = 1
    padding: int = 0


@dataclass
class ReLU:
    pass


@dataclass
class Flatten:
    pass


Layer = Dense | Conv2D | ReLU | Flatten


def is_parametric(layer: Layer) -> bool:
    return isinstance(layer, (Dense, Conv2D))


def neuron_count(layer: Layer) -> int:
    if isinstance(layer, Dense):
        return layer.weights.shape[0]
    if isinstance(layer, Conv2D):
        return layer.weights.shape[0]
    raise UnsupportedLayerError(f"{type(layer).__name__} has no neurons")


def output_shape(layer: Layer, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape produced by `layer` on a single (unbatched) input of `in_shape`."""
    if isinstance(layer, Dense):
        if len(in_shape) != 1 or in_shape[0] != layer.weights.shape[1]:
            raise DimensionError(f"Dense expects ({layer.weights.shape[1]},), got {in_shape}")
        return (layer.weights.shape[0],)
    if isinstance(layer, Conv2D):
        o, c, kh, kw = layer.weights.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise DimensionError(f"Conv2D expects ({c}, H, W), got {in_shape}")
        _, h, w = in_shape
        s, p = layer.stride, layer.padding
        oh = (h + 2 * p - kh) // s + 1
        ow = (w + 2 * p - kw) // s + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"Conv2D kernel {kh}x{kw} does not fit input {in_shape}")
        return (o, oh, ow)
    if isinstance(layer, ReLU):
        return in_shape
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    raise DimensionError(f"unknown layer {type(layer).__name__}")


@dataclass
class Model:
    layers: list[Layer]
    class_count: int
    input_shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Dense, Conv2D)):
                if layer.bias.shape != (neuron_count(layer),):
                    raise DimensionError(f"layer {i}: bias length must equal neuron count")
            try:
                shape = output_shape(layer, shape)
            except DimensionError as exc:
                raise DimensionError(f"layer {i}: {exc}") from exc
        if shape != (self.class_count,):
            raise DimensionError(f"model output shape {shape} != ({self.class_count},)")

    def parametric_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if is_parametric(l)]

    def layer_input_shapes(self) -> list[tuple[int, ...]]:
        """Input shape seen by each layer, index-aligned with `layers`."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shapes.append(shape)
            shape = output_shape(layer, shape)
        return shapes


def clone_model(model: Model) -> Model:
    layers: list[Layer] = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            layers.append(Dense(layer.weights.copy(), layer.bias.copy()))
        elif isinstance(layer, Conv2D):
            layers.append(Conv2D(layer.weights.copy(), layer.bias.copy(), layer.stride, layer.padding))
        else:
            layers.append(type(layer)())
    return Model(layers, model.class_count, model.input_shape, dict(model.meta))


def model_params(model: Model) -> list[Tensor]:
    out = []
    for layer in model.layers:
        if is_parametric(layer):
            out.extend([layer.weights, layer.bias])
    return out


def params_equal(a: Model, b: Model) -> bool:
    pa, pb = model_params(a), model_params(b)
    return len(pa) == len(pb) and all(
        x.shape == y.shape and np.array_equal(x, y) for x, y in zip(pa, pb)
    )


# ---------------------------------------------------------------------------
# initialization

def init_dense(out_dim: int, in_dim: int, rng: Rng) -> Dense:
    bound = 1.0 / np.sqrt(in_dim)
    return Dense(rng.uniform((out_dim, in_dim), -bound, bound), np.zeros(out_dim, dtype=DTYPE))


def init_conv(out_ch: int, in_ch: int, k: int, rng: Rng, stride: int = 1, padding: int = 0) -> Conv2D:
    bound = 1.0 / np.sqrt(in_ch * k * k)
    return Conv2D(
        rng.uniform((out_ch, in_ch, k, k), -bound, bound),
        np.zeros(out_ch, dtype=DTYPE),
        stride,
        padding,
    )


# ---------------------------------------------------------------------------
# forward / backward

def _conv_cols(layer: Conv2D, x: Tensor) -> tuple[np.ndarray, int, int]:
    b = x.shape[0]
    _, _, kh, kw = layer.weights.shape
    s, p = layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, -1)
    return cols, oh, ow


def _layer_forward(layer: Layer, x: Tensor, want_cache: bool):
    if isinstance(layer, Dense):
        return x @ layer.weights.T + layer.bias, x if want_cache else None
    if isinstance(layer, Conv2D):
        o = layer.weights.shape[0]
        cols, oh, ow = _conv_cols(layer, x)
        out = cols @ layer.weights.reshape(o, -1).T + layer.bias
        out = out.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2)
        return out, (cols, x.shape) if want_cache else None
    if isinstance(layer, ReLU):
        out = np.maximum(x, 0.0)
        return out, (x > 0.0) if want_cache else None
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape if want_cache else None
    raise DimensionError(f"unknown layer {type(layer).__name__}")


def _check_batch(model: Model, batch: Tensor) -> Tensor:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.shape[1:] != model.input_shape:
        raise DimensionError(f"batch shape {batch.shape[1:]} != input shape {model.input_shape}")
    return batch


def forward(model: Model, batch: Tensor) -> Tensor:
    """Logits for a batch; pure and thread-safe."""
    x = _check_batch(model, batch)
    for layer in model.layers:
        x, _ = _layer_forward(layer, x, want_cache=False)
    return x


def _forward_cached(model: Model, batch: Tensor):
    x = _check_batch(model, batch)
    caches = []
    # overflow here is an expected, handled condition (ascent divergence);
    # the step function checks finiteness and raises DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in model.layers:
            x, cache = _layer_forward(layer, x, want_cache=True)
            caches.append(cache)
    return x, caches


def _conv_backward(layer: Conv2D, cache, d_out: Tensor):
    cols, x_shape = cache
    b, c, h, w = x_shape
    o, _, kh, kw = layer.weights.shape
    s, p = layer.stride, layer.padding
    oh, ow = d_out.shape[2], d_out.shape[3]
    d_flat = np.ascontiguousarray(d_out.transpose(0, 2, 3, 1)).reshape(b * oh * ow, o)
    d_w = (d_flat.T @ cols).reshape(layer.weights.shape)
    d_b = d_flat.sum(axis=0)
    d_cols = (d_flat @ layer.weights.reshape(o, -1)).reshape(b, oh, ow, c, kh, kw)
    d_xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            d_xp[:, :, i : i + s * oh : s, j : j + s * ow : s] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    d_x = d_xp[:, :, p : p + h, p : p + w] if p else d_xp
    return d_x, d_w, d_b


def _backward(model: Model, caches, d_logits: Tensor) -> list[tuple[int, Tensor, Tensor]]:
    """Parameter gradients as (layer index, dW, db), from the output backwards."""
    grads = []
    d_x = d_logits
    for i in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[i], caches[i]
        if isinstance(layer, Dense):
            grads.append((i, d_x.T @ cache, d_x.sum(axis=0)))
            d_x = d_x @ layer.weights
        elif isinstance(layer, Conv2D):
            d_x, d_w, d_b = _conv_backward(layer, cache, d_x)
            grads.append((i, d_w, d_b))
        elif isinstance(layer, ReLU):
            d_x = d_x * cache
        elif isinstance(layer, Flatten):
            d_x = d_x.reshape(cache)
    return grads


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy (float64) and its gradient w.r.t. the logits."""
    b = logits.shape[0]
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    loss = float(-logp[np.arange(b), labels].mean())
    probs = expz / denom
    probs[np.arange(b), labels] -= 1.0
    return loss, (probs / b).astype(DTYPE)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    objective_sign: int = 1  # +1 descends (train), -1 ascends (unlearn)

    def validate(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.objective_sign not in (+1, -1):
            raise ValidationError("objective_sign must be +1 or -1")


def _check_labels(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValidationError(f"labels must lie in [0, {class_count})")
    return labels.astype(np.int64)


def sgd_step(model: Model, batch: Tensor, labels: np.ndarray, cfg: TrainConfig, step_index: int = 0) -> float:
    """One SGD step on mean cross-entropy; updates `model` in place.

    Returns the pre-update loss.  With objective_sign=-1 the step ascends
    (reverse training); with learning_rate=0 the parameters are left
    untouched bit for bit.
    """
    labels = _check_labels(labels, model.class_count)
    logits, caches = _forward_cached(model, batch)
    if not np.all(np.isfinite(logits)):
        raise DivergenceError(step_index, float("nan"))
    loss, d_logits = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise DivergenceError(step_index, loss)
    step = cfg.objective_sign * cfg.learning_rate
    if step != 0.0:
        for i, d_w, d_b in _backward(model, caches, d_logits):
            layer = model.layers[i]
            layer.weights -= (step * d_w).astype(DTYPE)
            layer.bias -= (step * d_b).astype(DTYPE)
    return loss


def train(model: Model, images: Tensor, labels: np.ndarray, cfg: TrainConfig) -> list[float]:
    """Epoch-shuffled minibatch SGD in place; returns per-epoch mean losses."""
    cfg.validate()
    labels = _check_labels(labels, model.class_count)
    n = images.shape[0]
    rng = Rng(cfg.seed)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.stream("shuffle", epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses.append(sgd_step(model, images[idx], labels[idx], cfg, step_index=step))
            step += 1
        history.append(float(np.mean(losses)))
    return history


# ---------------------------------------------------------------------------
# neuron-row view

@dataclass
class NeuronView:
    layer_index: int
    rows: Tensor  # (neurons, flat_in + 1); bias is the last column


def neuron_view(model: Model, layer_index: int) -> NeuronView:
    layer = model.layers[layer_index]
    if not is_parametric(layer):
        raise UnsupportedLayerError(f"layer {layer_index} ({type(layer).__name__}) has no neuron rows")
    flat = layer.weights.reshape(neuron_count(layer), -1)
    return NeuronView(layer_index, np.concatenate([flat, layer.bias[:, None]], axis=1))


def apply_view(model: Model, view: NeuronView) -> Model:
    """New model with one layer's parameters replaced from a neuron view."""
    out = clone_model(model)
    layer = out.layers[view.layer_index]
    if not is_parametric(layer):
        raise UnsupportedLayerError(f"layer {view.layer_index} has no neuron rows")
    expected = (neuron_count(layer), layer.weights[0].size + 1)
    if view.rows.shape != expected:
        raise DimensionError(f"view shape {view.rows.shape} != {expected}")
    layer.weights = np.ascontiguousarray(view.rows[:, :-1], dtype=DTYPE).reshape(layer.weights.shape)
    layer.bias = np.ascontiguousarray(view.rows[:, -1], dtype=DTYPE)
    return out


# ---------------------------------------------------------------------------
# container format: MAGIC | version u32 LE | manifest_len u32 LE |
# manifest JSON (utf-8) | float32 LE parameter blobs in manifest order

def _layer_manifest(layer: Layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "out": int(layer.weights.shape[0]), "in": int(layer.weights.shape[1])}
    if isinstance(layer, Conv2D):
        o, c, kh, kw = layer.weights.shape
        return {
            "kind": "conv2d",
            "out_ch": int(o),
            "in_ch": int(c),
            "kh": int(kh),
            "kw": int(kw),
            "stride": int(layer.stride),
            "padding": int(layer.padding),
        }
    if isinstance(layer, ReLU):
        return {"kind": "relu"}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    raise DimensionError(f"unknown layer {type(layer).__name__}")


def model_bytes(model: Model) -> bytes:
    manifest = {
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "layers": [_layer_manifest(l) for l in model.layers],
        "meta": model.meta,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION), struct.pack("<I", len(blob)), blob]
    for layer in model.layers:
        if is_parametric(layer):
            parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def save_model(model: Model, path) -> None:
    atomic_write_bytes(path, model_bytes(model))


def _read_exact(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(data):
        raise FormatError(f"truncated container while reading {what}", offset)
    return data[offset : offset + size]


def model_from_bytes(data: bytes) -> Model:
    if _read_exact(data, 0, 4, "magic") != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}", 0)
    (version,) = struct.unpack("<I", _read_exact(data, 4, 4, "version"))
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported container version {version}", 4)
    (mlen,) = struct.unpack("<I", _read_exact(data, 8, 4, "manifest length"))
    raw = _read_exact(data, 12, mlen, "manifest")
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", 12) from exc

    offset = 12 + mlen
    layers: list[Layer] = []
    for spec in manifest["layers"]:
        kind = spec.get("kind")
        if kind == "dense":
            shape = (spec["out"], spec["in"])
            w = np.frombuffer(_read_exact(data, offset, 4 * shape[0] * shape[1], "dense weights"), dtype="<f4")
            offset += w.nbytes
            b = np.frombuffer(_read_exact(data, offset, 4 * shape[0], "dense bias"), dtype="<f4")
            offset += b.nbytes
            layers.append(Dense(w.reshape(shape).astype(DTYPE), b.astype(DTYPE)))
        elif kind == "conv2d":
            shape = (spec["out_ch"], spec["in_ch"], spec["kh"], spec["kw"])
            count = int(np.prod(shape))
            w = np.frombuffer(_read_exact(data, offset, 4 * count, "conv weights"), dtype="<f4")
            offset += w.nbytes
            b = np.frombuffer(_read_exact(data, offset, 4 * shape[0], "conv bias"), dtype="<f4")
            offset += b.nbytes
            layers.append(Conv2D(w.reshape(shape).astype(DTYPE), b.astype(DTYPE), spec["stride"], spec["padding"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise FormatError(f"unknown layer kind {kind!r} in manifest", 12)
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after parameter blobs", offset)
    return Model(layers, manifest["class_count"], tuple(manifest["input_shape"]), manifest.get("meta", {}))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
