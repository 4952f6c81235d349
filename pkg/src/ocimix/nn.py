"""Small dense network with a single-head linear classifier.

Everything is float64 numpy.  The extractor is a stack of dense layers; the
head has one weight row per class and a bias that stays fixed at zero.
Loss is the batch-mean cross entropy against (possibly soft) labels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_HEADER = "ocimix-model-v1"
LOG_FLOOR = 1e-12
ACTIVATIONS = ("relu", "identity")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]
    head_weights: np.ndarray  # (C, d), row c is w_c
    head_bias: np.ndarray = field(default=None)  # fixed at zero

    def __post_init__(self):
        if self.head_bias is None:
            object.__setattr__(self, "head_bias", np.zeros(self.head_weights.shape[0]))
        if self.layers:
            if self.layers[-1].activation != "relu":
                raise ValueError("last extractor layer must be relu")
            for a, b in zip(self.layers, self.layers[1:]):
                if a.weight.shape[1] != b.weight.shape[0]:
                    raise DimensionError("consecutive extractor layers do not chain")
        if self.head_weights.shape[1] != self.feature_dim:
            raise DimensionError(
                f"head expects {self.head_weights.shape[1]} features, "
                f"extractor produces {self.feature_dim}"
            )

    @property
    def class_count(self) -> int:
        return self.head_weights.shape[0]

    @property
    def input_dim(self) -> int:
        if self.layers:
            return self.layers[0].weight.shape[0]
        return self.head_weights.shape[1]

    @property
    def feature_dim(self) -> int:
        if self.layers:
            return self.layers[-1].weight.shape[1]
        return self.head_weights.shape[1]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params += [layer.weight, layer.bias]
        params.append(self.head_weights)
        return params


@dataclass(frozen=True)
class GradientSet:
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    head_weights: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for gw, gb in self.layers:
            out += [gw, gb]
        out.append(self.head_weights)
        return out


def init_model(input_dim, hidden, class_count, rng) -> Model:
    """He-initialised relu extractor with the given hidden widths.

    The head starts at zero so every class begins with the same weight norm.
    """
    layers = []
    fan_in = input_dim
    for width in hidden:
        w = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
        layers.append(Layer(w, np.zeros(width), "relu"))
        fan_in = width
    return Model(tuple(layers), np.zeros((class_count, fan_in)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(model: Model, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] < 1:
        raise DimensionError("batch must contain at least one row")
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"model takes {model.input_dim} inputs, batch has {x.shape[1]}")
    return x


def _extract(model: Model, x: np.ndarray):
    """Run the extractor, keeping each layer's input and pre-activation."""
    cache = []
    h = x
    for layer in model.layers:
        z = h @ layer.weight + layer.bias
        cache.append((h, z))
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, cache


def forward(model: Model, batch) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, probabilities)`` for a batch of inputs."""
    x = _as_batch(model, batch)
    h, _ = _extract(model, x)
    return h, softmax(h @ model.head_weights.T + model.head_bias)


def per_sample_ce(probabilities: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """-y^T log p for each row, with p floored at LOG_FLOOR."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"probabilities {p.shape} vs labels {y.shape}")
    return -(y * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=1)


def cross_entropy(probabilities, labels) -> float:
    return float(per_sample_ce(probabilities, labels).mean())


def one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def backward(model: Model, batch, labels) -> GradientSet:
    """Gradient of the batch-mean cross entropy w.r.t. every trainable tensor."""
    x = _as_batch(model, batch)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (x.shape[0], model.class_count):
        raise DimensionError(f"labels {y.shape} do not match batch of {x.shape[0]}")
    h, cache = _extract(model, x)
    p = softmax(h @ model.head_weights.T + model.head_bias)
    dlogits = (p - y) / x.shape[0]
    g_head = dlogits.T @ h
    grad_h = dlogits @ model.head_weights
    layer_grads = []
    for layer, (inp, z) in zip(reversed(model.layers), reversed(cache)):
        dz = grad_h * (z > 0) if layer.activation == "relu" else grad_h
        layer_grads.append((inp.T @ dz, dz.sum(axis=0)))
        grad_h = dz @ layer.weight.T
    return GradientSet(tuple(reversed(layer_grads)), g_head)


def sgd_step(model: Model, grads: GradientSet, lr: float) -> Model:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(grads.layers) != len(model.layers):
        raise DimensionError("gradient set does not match model depth")
    layers = []
    for layer, (gw, gb) in zip(model.layers, grads.layers):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise DimensionError("gradient shape mismatch")
        layers.append(Layer(layer.weight - lr * gw, layer.bias - lr * gb, layer.activation))
    if grads.head_weights.shape != model.head_weights.shape:
        raise DimensionError("gradient shape mismatch")
    return Model(tuple(layers), model.head_weights - lr * grads.head_weights, model.head_bias)


def train_step(model: Model, batch, labels, lr: float) -> tuple[Model, float]:
    """One SGD step; returns the updated model and the pre-step loss."""
    _, p = forward(model, batch)
    loss = cross_entropy(p, labels)
    return sgd_step(model, backward(model, batch, labels), lr), loss


def predict(model: Model, batch) -> np.ndarray:
    return forward(model, batch)[1].argmax(axis=1)


def classifier_weight_norms(model: Model, class_set) -> np.ndarray:
    ids = [int(c) for c in class_set]
    for c in ids:
        if not 0 <= c < model.class_count:
            raise KeyError(f"unknown class id {c}")
    return np.sqrt((model.head_weights[ids] ** 2).sum(axis=1))


def save_model(model: Model, path) -> None:
    doc = {
        "format": CHECKPOINT_HEADER,
        "layers": [
            {
                "shape": list(layer.weight.shape),
                "activation": layer.activation,
                "weight": layer.weight.ravel().tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in model.layers
        ],
        "head": {
            "shape": list(model.head_weights.shape),
            "weight": model.head_weights.ravel().tolist(),
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not an {CHECKPOINT_HEADER} checkpoint")
    layers = tuple(
        Layer(
            np.array(entry["weight"], dtype=np.float64).reshape(entry["shape"]),
            np.array(entry["bias"], dtype=np.float64),
            entry["activation"],
        )
        for entry in doc["layers"]
    )
    head = doc["head"]
    return Model(layers, np.array(head["weight"], dtype=np.float64).reshape(head["shape"]))
