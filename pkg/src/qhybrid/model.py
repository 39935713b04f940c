"""Hybrid and classical reference graphs, and the quantum layer bridging them."""
from __future__ import annotations

import numpy as np

from . import qgrad
from .data import CIFAR_SHAPE, MNIST_SHAPE, NORMALIZATION
from .errors import NoCachedForward, ShapeMismatch, UnsupportedShape
from .nn import Conv2D, Dense, Flatten, Layer, MaxPool2D, Normalize, ReLU, count_parameters

BRIDGE_NORM_FLOOR = 1e-12


class QuantumLayer(Layer):
    """Amplitude embedding of a 2**n feature vector, entangler layers, <Z_i> readout.

    The incoming vector is L2-normalized internally with its norm floored at
    ``BRIDGE_NORM_FLOOR``, so an all-zero row maps to zero expectations instead
    of failing.
    """

    kind = "quantum"
    trainable = True

    def __init__(self, n_qubits=4, n_layers=2, rng=None, norm_floor=BRIDGE_NORM_FLOOR):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.n_qubits, self.n_layers, self.norm_floor = n_qubits, n_layers, norm_floor
        self.params["weight"] = rng.uniform(0.0, 2 * np.pi, size=(n_layers, n_qubits))
        self.zero_grad()

    def output_shape(self, in_shape):
        if tuple(in_shape) != (2**self.n_qubits,):
            raise ShapeMismatch(f"quantum layer expects ({2**self.n_qubits},), got {in_shape}")
        return (self.n_qubits,)

    def forward(self, x):
        return qgrad.batched_forward(x, self.params["weight"], self.norm_floor)

    def backward(self, dy, cache):
        d_w, d_x = qgrad.batched_backward(dy, self.params["weight"], cache, self.norm_floor)
        return d_x, {"weight": d_w}

    def describe(self):
        return {"kind": self.kind, "n_qubits": self.n_qubits, "n_layers": self.n_layers}


class ModelGraph:
    """Ordered layer list with shape validation at construction.

    ``feature_index`` names the layer whose output is the penultimate
    representation exported for feature-space analysis.
    """

    def __init__(self, layers, input_shape, kind="classical", feature_index=None):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(input_shape)
        self.kind = kind
        n_quantum = sum(isinstance(layer, QuantumLayer) for layer in self.layers)
        if kind == "hybrid" and n_quantum != 1:
            raise ValueError(f"hybrid graph needs exactly one quantum layer, found {n_quantum}")
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        self.shapes = shapes
        self.feature_index = len(self.layers) - 2 if feature_index is None else feature_index
        self._caches = None

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def feature_width(self) -> int:
        return self.shapes[self.feature_index + 1][0]

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i}.{layer.kind}.{name}"] = p
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                out[f"{i}.{layer.kind}.{name}"] = layer.grads[name]
        return out

    def run(self, batch):
        """Pure forward: returns (logits, caches, penultimate features)."""
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"model expects [B,{self.input_shape}], got {x.shape}")
        caches, features = [], None
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x)
            caches.append(cache)
            if i == self.feature_index:
                features = x
        return x, caches, features

    def run_backward(self, d_logits, caches):
        """Pure backward: returns (named parameter grads, input grad)."""
        dy = np.asarray(d_logits, dtype=np.float64)
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dy, g = layer.backward(dy, caches[i])
            for name, val in g.items():
                grads[f"{i}.{layer.kind}.{name}"] = val
        return grads, dy

    def forward(self, batch):
        logits, self._caches, _ = self.run(batch)
        return logits

    def backward(self, d_logits, return_input_grad=False):
        """Gradients for every parameter; also stored on the layers."""
        if self._caches is None:
            raise NoCachedForward("call forward() before backward()")
        grads, d_input = self.run_backward(d_logits, self._caches)
        self.set_grads(grads)
        return (grads, d_input) if return_input_grad else grads

    def set_grads(self, grads: dict):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                layer.grads[name] = grads[f"{i}.{layer.kind}.{name}"]

    def features(self, batch) -> np.ndarray:
        return self.run(batch)[2]

    def describe(self) -> dict:
        layers = []
        for layer, shape in zip(self.layers, self.shapes[1:]):
            entry = layer.describe()
            entry["output_shape"] = list(shape)
            entry["parameters"] = int(sum(p.size for p in layer.params.values()))
            layers.append(entry)
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "feature_width": self.feature_width,
            "layers": layers,
            "total_parameters": count_parameters(self),
        }


def _conv_stack(dataset_shape, rng, bridge_width):
    dataset_shape = tuple(dataset_shape)
    if dataset_shape == MNIST_SHAPE:
        c1, c2 = 8, 16
    elif dataset_shape == CIFAR_SHAPE:
        c1, c2 = 16, 32
    else:
        raise UnsupportedShape(
            f"no reference stack for {dataset_shape}; supported: {MNIST_SHAPE}, {CIFAR_SHAPE}"
        )
    c, h, w = dataset_shape
    mean, std = NORMALIZATION[dataset_shape]
    flat = c2 * (h // 4) * (w // 4)
    return [
        Normalize(mean, std),
        Conv2D(c, c1, 3, 1, 1, rng=rng),
        ReLU(),
        MaxPool2D(2),
        Conv2D(c1, c2, 3, 1, 1, rng=rng),
        ReLU(),
        MaxPool2D(2),
        Flatten(),
        Dense(flat, bridge_width, rng=rng),
    ]


def build_hybrid(dataset_shape, n_classes, n_qubits=4, n_layers=2, seed=0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers = _conv_stack(dataset_shape, rng, 2**n_qubits)
    layers += [QuantumLayer(n_qubits, n_layers, rng=rng), Dense(n_qubits, n_classes, rng=rng)]
    return ModelGraph(layers, dataset_shape, kind="hybrid", feature_index=len(layers) - 2)


def build_classical(dataset_shape, n_classes, n_qubits=4, seed=0) -> ModelGraph:
    """Same conv stack with the quantum layer swapped for a dense+relu block.

    ``n_qubits`` only sets the bridge width (2**n) so both graphs match.
    """
    rng = np.random.default_rng(seed)
    width = 2**n_qubits
    layers = _conv_stack(dataset_shape, rng, width)
    layers += [Dense(width, width, rng=rng), ReLU(), Dense(width, n_classes, rng=rng)]
    return ModelGraph(layers, dataset_shape, kind="classical", feature_index=len(layers) - 2)


def build_model(kind, dataset_shape, n_classes, n_qubits=4, n_layers=2, seed=0) -> ModelGraph:
    if kind == "hybrid":
        return build_hybrid(dataset_shape, n_classes, n_qubits, n_layers, seed)
    if kind == "classical":
        return build_classical(dataset_shape, n_classes, n_qubits, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def forward(model: ModelGraph, batch) -> np.ndarray:
    return model.forward(batch)


def backward(model: ModelGraph, d_logits) -> dict:
    return model.backward(d_logits)
