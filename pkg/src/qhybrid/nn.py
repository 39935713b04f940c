"""Small numpy deep-learning stack with hand-written backward passes.

Tensors are plain float64 ``np.ndarray`` objects in row-major layout. Every
layer exposes ``forward(x) -> (y, cache)`` and
``backward(dy, cache) -> (dx, param_grads)``. Layers hold no per-call state, so
several sample chunks can run against the same weights at once.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagic,
    LabelOutOfRange,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)

BIAS_INIT = 0.01


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"
    trainable = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class Conv2D(Layer):
    kind = "conv2d"
    trainable = True

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None):
        super().__init__()
        if stride < 1:
            raise ValueError("stride must be >= 1")
        rng = np.random.default_rng(rng)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = he_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in
        )
        self.params["bias"] = np.full(out_channels, BIAS_INIT)
        self.zero_grad()

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeMismatch(f"conv expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeMismatch(f"kernel {k} does not fit padded input {h}x{w}")
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeMismatch(f"conv2d expects [B,C,H,W], got {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # (B, Ho, Wo, C*k*k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0], ho, wo, -1)
        w = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ w.T + self.params["bias"]
        return out.transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, dy, cache):
        in_shape, cols = cache
        b, c, h, w_in = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        dy_t = dy.transpose(0, 2, 3, 1)  # (B, Ho, Wo, O)
        ho, wo = dy_t.shape[1:3]
        grads = {
            "weight": np.tensordot(dy_t, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(
                self.params["weight"].shape
            ),
            "bias": dy.sum(axis=(0, 2, 3)),
        }
        dcols = (dy_t @ self.params["weight"].reshape(self.out_channels, -1)).reshape(
            b, ho, wo, c, k, k
        )
        dxp = np.zeros((b, c, h + 2 * p, w_in + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j].transpose(
                    0, 3, 1, 2
                )
        return (dxp[:, :, p : p + h, p : p + w_in] if p else dxp), grads

    def describe(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }


class MaxPool2D(Layer):
    """Max pooling; ties route the gradient to the first element in row-major order."""

    kind = "maxpool2d"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = window
        self.stride = stride or window

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.window > h or self.window > w:
            raise ShapeMismatch(f"pool window {self.window} larger than {h}x{w}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeMismatch(f"maxpool2d expects [B,C,H,W], got {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(win.shape[:4] + (k * k,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dy, cache):
        in_shape, arg = cache
        b, c, ho, wo = arg.shape
        di, dj = np.divmod(arg, self.window)
        rows = np.arange(ho)[None, None, :, None] * self.stride + di
        cols = np.arange(wo)[None, None, None, :] * self.stride + dj
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dx = np.zeros(in_shape)
        np.add.at(dx, (bi, ci, rows, cols), dy)
        return dx, {}

    def describe(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


class Dense(Layer):
    kind = "dense"
    trainable = True

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = he_uniform(rng, (out_features, in_features), in_features)
        self.params["bias"] = np.full(out_features, BIAS_INIT)
        self.zero_grad()

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeMismatch(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"dense expects [B,{self.in_features}], got {x.shape}")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, dy, cache):
        grads = {"weight": dy.T @ cache, "bias": dy.sum(axis=0)}
        return dy @ self.params["weight"], grads

    def describe(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        # np.maximum keeps NaN visible to the divergence guard
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, cache):
        return np.where(cache, dy, 0.0), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Normalize(Layer):
    """Fixed per-channel (x - mean) / std, so the model consumes raw [0, 1] pixels."""

    kind = "normalize"

    def __init__(self, mean, std):
        super().__init__()
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(std, dtype=np.float64).reshape(-1)

    def output_shape(self, in_shape):
        if in_shape[0] != self.mean.size:
            raise ShapeMismatch(f"normalize has {self.mean.size} channels, input {in_shape[0]}")
        return in_shape

    def _bcast(self, v):
        return v[None, :, None, None]

    def forward(self, x):
        return (x - self._bcast(self.mean)) / self._bcast(self.std), None

    def backward(self, dy, cache):
        return dy / self._bcast(self.std), {}

    def describe(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "std": self.std.tolist()}


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({b},)")
    if np.any(labels < 0) or np.any(labels >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(log_norm - z[rows, labels]))
    d = np.exp(z - log_norm[:, None])
    d[rows, labels] -= 1.0
    return loss, d / b


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class OptimizerState:
    """SGD or Adam. Moments are keyed by parameter name."""

    def __init__(self, kind="adam", learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        kind = kind.lower()
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.kind, self.learning_rate = kind, learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """Update ``params`` in place (and return it)."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {grads[name].shape} vs param {p.shape}")
    state.step_count += 1
    lr, t = state.learning_rate, state.step_count
    for name, p in params.items():
        g = grads[name]
        if state.kind == "sgd":
            p -= lr * g
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def count_parameters(model) -> int:
    layers = getattr(model, "layers", model)
    return int(sum(p.size for layer in layers for p in layer.params.values()))


# ---------------------------------------------------------------------------
# Checkpoint records
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"QHCP"
CHECKPOINT_VERSION = 1


def write_params(path, named_params: dict) -> None:
    """Binary layout, little-endian: magic, u32 version, then per parameter
    u32 name length, utf-8 name, u32 rank, u64 dims, float64 data."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in named_params.items():
        raw = name.encode("utf-8")
        arr = np.array(arr, dtype="<f8", order="C")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise TruncatedFile(f"{path}: too short for a checkpoint header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")

    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"{path}: record truncated at byte {pos}")
        piece = buf[pos : pos + n]
        pos += n
        return piece

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out
