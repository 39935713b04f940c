"""Adversarial robustness (FGSM) and feature-space analysis (PCA)."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DegenerateInput, EmptySplit, ShapeMismatch
from .model import ModelGraph
from .nn import softmax_cross_entropy
from .train import accuracy, predict_logits


@dataclass(frozen=True)
class AttackConfig:
    """FGSM step size in raw pixel units; results are clamped to ``clamp``."""

    epsilon: float = 0.1
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


def input_gradient(model: ModelGraph, batch, labels) -> np.ndarray:
    """d(mean cross-entropy)/d(raw input), through every layer of the model."""
    logits, caches, _ = model.run(batch)
    _, d_logits = softmax_cross_entropy(logits, labels)
    _, d_input = model.run_backward(d_logits, caches)
    return d_input


def fgsm_attack(model: ModelGraph, batch, labels, config: AttackConfig) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"batch {x.shape} does not fit model input {model.input_shape}")
    if config.epsilon == 0:
        return x.copy()
    step = config.epsilon * np.sign(input_gradient(model, x, labels))
    lo, hi = config.clamp
    return np.clip(x + step, lo, hi)


def attack_dataset(model: ModelGraph, dataset: Dataset, config: AttackConfig, batch_size=256):
    out = np.empty_like(dataset.images)
    for i in range(0, len(dataset), batch_size):
        sl = slice(i, i + batch_size)
        out[sl] = fgsm_attack(model, dataset.images[sl], dataset.labels[sl], config)
    return out


def robustness_report(model: ModelGraph, dataset: Dataset, config: AttackConfig, batch_size=256) -> dict:
    if len(dataset) == 0:
        raise EmptySplit(f"cannot attack empty {dataset.split} split")
    clean = predict_logits(model, dataset.images, batch_size).argmax(axis=1)
    adv = attack_dataset(model, dataset, config, batch_size)
    robust = predict_logits(model, adv, batch_size).argmax(axis=1)
    return {
        "attack": "fgsm",
        "epsilon": config.epsilon,
        "epsilon_units": "raw_pixel",
        "clamp": list(config.clamp),
        "n_samples": len(dataset),
        "clean_accuracy": accuracy(clean, dataset.labels),
        "robust_accuracy": accuracy(robust, dataset.labels),
    }


def robust_accuracy(model: ModelGraph, dataset: Dataset, config: AttackConfig, batch_size=256) -> float:
    return robustness_report(model, dataset, config, batch_size)["robust_accuracy"]


# ---------------------------------------------------------------------------
# Feature space
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingDump:
    features: np.ndarray  # [N, width]
    labels: np.ndarray


def extract_embeddings(model: ModelGraph, dataset: Dataset, batch_size=256) -> EmbeddingDump:
    """Penultimate-layer features (quantum expectations for hybrid graphs)."""
    feats = [
        model.features(dataset.images[i : i + batch_size])
        for i in range(0, len(dataset), batch_size)
    ]
    features = np.concatenate(feats) if feats else np.zeros((0, model.feature_width))
    if features.shape[1] != model.feature_width:
        raise ShapeMismatch(f"feature width {features.shape[1]} != {model.feature_width}")
    return EmbeddingDump(features, dataset.labels.copy())


@dataclass
class PCAResult:
    coords: np.ndarray  # [N, k]
    components: np.ndarray  # [k, width], orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def _top_eigenpairs(cov: np.ndarray, k: int, max_iter: int, tol: float, rng):
    """Power iteration with deflation; vectors are re-orthogonalized every step."""
    d = cov.shape[0]
    scale = max(np.trace(cov), 1e-300)
    vecs, vals = [], []
    for _ in range(k):
        basis = np.array(vecs).reshape(-1, d)
        v = rng.standard_normal(d)
        v -= basis.T @ (basis @ v)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = cov @ v
            w -= basis.T @ (basis @ w)
            lam = float(v @ w)
            if np.linalg.norm(w - lam * v) <= tol * scale:
                break
            norm = np.linalg.norm(w)
            if norm <= tol * scale:
                # remaining spectrum is numerically zero; any orthogonal direction will do
                lam = 0.0
                break
            v = w / norm
        v -= basis.T @ (basis @ v)
        v /= np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vecs.append(v)
        vals.append(max(lam, 0.0))
    return np.array(vecs), np.array(vals)


def pca_project(embeddings, k: int, max_iter=1000, tol=1e-10, seed=0) -> PCAResult:
    x = np.asarray(getattr(embeddings, "features", embeddings), dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise DegenerateInput("PCA needs at least two samples")
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    total = float(np.trace(cov))
    if total <= 0:
        raise DegenerateInput("all samples are identical (zero variance)")
    comps, vals = _top_eigenpairs(cov, k, max_iter, tol, np.random.default_rng(seed))
    order = np.argsort(-vals, kind="stable")
    comps, vals = comps[order], vals[order]
    return PCAResult(xc @ comps.T, comps, vals, vals / total, mean)


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def _write_labeled_csv(path, labels, values, prefix, start):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"{prefix}{i + start}" for i in range(values.shape[1])])
        for lab, row in zip(labels, values):
            writer.writerow([int(lab)] + [repr(float(v)) for v in row])


def write_embeddings_csv(path, dump: EmbeddingDump) -> None:
    _write_labeled_csv(path, dump.labels, dump.features, "f", 0)


def write_pca(csv_path, json_path, labels, result: PCAResult) -> None:
    _write_labeled_csv(csv_path, labels, result.coords, "pc", 1)
    doc = {
        "explained_variance_ratio": result.explained_variance_ratio.tolist(),
        "explained_variance": result.explained_variance.tolist(),
        "components": result.components.tolist(),
        "mean": result.mean.tolist(),
    }
    Path(json_path).write_text(json.dumps(doc, indent=2) + "\n")
