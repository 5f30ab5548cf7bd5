"""Shared model builders and float64 reference maths used as test oracles."""
import numpy as np

from otrepair.nn import Conv2D, Dense, Flatten, Model, ReLU, init_conv, init_dense
from otrepair.tensors import Rng


def make_mlp(seed=0, input_shape=(1, 4, 4), hidden=(8, 6), classes=3, name="mlp"):
    rng = Rng(seed)
    layers = [Flatten()]
    in_dim = int(np.prod(input_shape))
    for k, width in enumerate(hidden):
        layers += [init_dense(width, in_dim, rng.stream("dense", k)), ReLU()]
        in_dim = width
    layers.append(init_dense(classes, in_dim, rng.stream("dense", len(hidden))))
    return Model(layers, classes, input_shape, {"name": name, "seed": seed})


def make_cnn(seed=0, input_shape=(1, 8, 8), channels=(3, 4), classes=3, name="cnn"):
    rng = Rng(seed)
    layers = []
    c_in, side = input_shape[0], input_shape[1]
    for k, c_out in enumerate(channels):
        layers += [init_conv(c_out, c_in, 3, rng.stream("conv", k), stride=2, padding=1), ReLU()]
        c_in, side = c_out, (side + 2 - 3) // 2 + 1
    layers.append(Flatten())
    layers.append(init_dense(classes, c_in * side * side, rng.stream("head")))
    return Model(layers, classes, input_shape, {"name": name, "seed": seed})


# float64 reference forward, written with explicit loops for the conv path

def _conv_f64(layer, x):
    b, c, h, w = x.shape
    o, _, kh, kw = layer.weights.shape
    s, p = layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    wf = layer.weights.astype(np.float64)
    bf = layer.bias.astype(np.float64)
    out = np.zeros((b, o, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * s : i * s + kh, j * s : j * s + kw]
            out[:, :, i, j] = np.tensordot(patch, wf, axes=([1, 2, 3], [1, 2, 3])) + bf
    return out


def forward_f64(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    for layer in model.layers:
        if isinstance(layer, Dense):
            x = x @ layer.weights.astype(np.float64).T + layer.bias.astype(np.float64)
        elif isinstance(layer, Conv2D):
            x = _conv_f64(layer, x)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
    return x


def ce_loss_f64(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def relu_pattern(model, batch):
    """Sign pattern at every ReLU input; finite differences are only valid
    where a perturbation leaves this pattern unchanged."""
    x = np.asarray(batch, dtype=np.float64)
    signs = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            x = x @ layer.weights.astype(np.float64).T + layer.bias.astype(np.float64)
        elif isinstance(layer, Conv2D):
            x = _conv_f64(layer, x)
        elif isinstance(layer, ReLU):
            signs.append(x > 0.0)
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
    return signs
