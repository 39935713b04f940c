"""Training loop, classification metrics, resource logging and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as qdata
from .errors import DivergedLoss, EmptySplit, ShapeMismatch
from .model import ModelGraph
from .nn import OptimizerState, count_parameters, optimizer_step, read_params, softmax_cross_entropy, write_params

try:
    import resource
except ImportError:  # not available on Windows
    resource = None

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_acc", "val_f1", "seconds", "peak_mem_bytes"]


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 42
    dataset: str = "synthetic"
    model: str = "hybrid"
    augment: bool = True
    workers: int = 1
    sample_cpu: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_f1: float
    seconds: float
    peak_mem_bytes: int | None = None
    cpu_percent: float | None = None

    def csv_row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.val_loss),
            repr(self.val_acc),
            repr(self.val_f1),
            f"{self.seconds:.6f}",
            "" if self.peak_mem_bytes is None else str(self.peak_mem_bytes),
        ]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def accuracy(predictions, labels) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def per_class_scores(predictions, labels, n_classes: int):
    """Per-class precision, recall and F1 from direct counting.

    Undefined ratios (empty denominator) are reported as 0.
    """
    p = np.asarray(predictions)
    y = np.asarray(labels)
    precision = np.zeros(n_classes)
    recall = np.zeros(n_classes)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        precision[c] = tp / (tp + fp) if tp + fp else 0.0
        recall[c] = tp / (tp + fn) if tp + fn else 0.0
        s = precision[c] + recall[c]
        f1[c] = 2 * precision[c] * recall[c] / s if s else 0.0
    return precision, recall, f1


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    precision: float
    recall: float
    macro_f1: float
    confusion: np.ndarray
    per_class_f1: np.ndarray
    absent_classes: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "loss": self.loss,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.macro_f1,
            "f1_average": "macro",
            "per_class_f1": self.per_class_f1.tolist(),
            "absent_classes": self.absent_classes,
            "confusion_matrix": self.confusion.tolist(),
        }


def classification_metrics(predictions, labels, n_classes: int, loss=float("nan")) -> EvalResult:
    precision, recall, f1 = per_class_scores(predictions, labels, n_classes)
    present = np.bincount(np.asarray(labels), minlength=n_classes) > 0
    return EvalResult(
        loss=loss,
        accuracy=accuracy(predictions, labels),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=confusion_matrix(predictions, labels, n_classes),
        per_class_f1=f1,
        absent_classes=[int(c) for c in np.flatnonzero(~present)],
    )


def predict_logits(model: ModelGraph, images, batch_size=256, workers=1) -> np.ndarray:
    chunks = [images[i : i + batch_size] for i in range(0, len(images), batch_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(lambda c: model.run(c)[0], chunks))
    else:
        outs = [model.run(c)[0] for c in chunks]
    return np.concatenate(outs)


def evaluate(model: ModelGraph, dataset: qdata.Dataset, batch_size=256, workers=1) -> EvalResult:
    """One full pass without augmentation; macro-averaged precision/recall/F1."""
    if len(dataset) == 0:
        raise EmptySplit(f"cannot evaluate on empty {dataset.split} split")
    logits = predict_logits(model, dataset.images, batch_size, workers)
    loss, _ = softmax_cross_entropy(logits, dataset.labels)
    return classification_metrics(logits.argmax(axis=1), dataset.labels, model.n_classes, loss)


# ---------------------------------------------------------------------------
# Resource logging
# ---------------------------------------------------------------------------


def peak_memory_bytes() -> int | None:
    """Peak resident set size of this process, or None where unsupported."""
    if resource is None:
        return None
    try:
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (OSError, ValueError):
        return None
    # Linux reports KiB, macOS bytes
    return int(peak) if os.uname().sysname == "Darwin" else int(peak) * 1024


@dataclass
class ResourceUsage:
    seconds: float = 0.0
    peak_mem_bytes: int | None = None
    cpu_percent: float | None = None


@contextmanager
def measure(sample_cpu=False):
    usage = ResourceUsage()
    t0 = time.perf_counter()
    cpu0 = time.process_time()
    try:
        yield usage
    finally:
        usage.seconds = time.perf_counter() - t0
        usage.peak_mem_bytes = peak_memory_bytes()
        if sample_cpu and usage.seconds > 0:
            # process CPU time over wall time, normalized by available cores
            usage.cpu_percent = 100.0 * (time.process_time() - cpu0) / usage.seconds / (os.cpu_count() or 1)


def resource_log(closure, sample_cpu=False):
    """Run ``closure()``; return (wall seconds, peak memory bytes or None)."""
    with measure(sample_cpu) as usage:
        closure()
    return usage.seconds, usage.peak_mem_bytes


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _batch_grads(model: ModelGraph, images, labels, workers: int):
    """Loss and summed grads for one batch; chunks are reduced in fixed order."""
    if workers <= 1 or len(labels) < 2 * workers:
        logits, caches, _ = model.run(images)
        loss, d_logits = softmax_cross_entropy(logits, labels)
        grads, _ = model.run_backward(d_logits, caches)
        return loss, grads

    n = len(labels)
    bounds = np.linspace(0, n, workers + 1).astype(int)

    def work(i):
        sl = slice(bounds[i], bounds[i + 1])
        logits, caches, _ = model.run(images[sl])
        loss, d_logits = softmax_cross_entropy(logits, labels[sl])
        w = (bounds[i + 1] - bounds[i]) / n
        grads, _ = model.run_backward(d_logits * w, caches)
        return loss * w, grads

    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(work, range(workers)))
    loss = sum(p[0] for p in parts)
    grads = {k: sum(p[1][k] for p in parts) for k in parts[0][1]}
    return loss, grads


def train_model(config: TrainConfig, model: ModelGraph, train_set, val_set, progress=None):
    """Shuffled mini-batch training; one EpochRecord per epoch.

    Deterministic for a fixed seed when ``workers == 1``.
    """
    if len(train_set) == 0:
        raise EmptySplit("training split is empty")
    if len(val_set) == 0:
        raise EmptySplit("validation split is empty")
    opt = OptimizerState(config.optimizer, config.lr)
    params = model.named_params()
    batches = qdata.BatchIterator(len(train_set), config.batch_size, seed=config.seed)
    policy = qdata.AUGMENT_POLICY.get(config.dataset, {"flip": False, "crop_pad": 0})
    aug_rng = np.random.default_rng([config.seed, 1])
    records = []
    for epoch in range(config.epochs):
        with measure(config.sample_cpu) as usage:
            total, seen = 0.0, 0
            for step, idx in enumerate(batches.batches(epoch)):
                x = train_set.images[idx]
                if config.augment:
                    x = qdata.augment_batch(x, aug_rng, **policy)
                y = train_set.labels[idx]
                loss, grads = _batch_grads(model, x, y, config.workers)
                if not np.isfinite(loss):
                    raise DivergedLoss(f"non-finite loss {loss} at epoch {epoch + 1}, batch {step}")
                optimizer_step(params, grads, opt)
                total += loss * len(idx)
                seen += len(idx)
            val = evaluate(model, val_set, workers=config.workers)
        model.set_grads(grads)
        rec = EpochRecord(
            epoch=epoch + 1,
            train_loss=total / seen,
            val_loss=val.loss,
            val_acc=val.accuracy,
            val_f1=val.macro_f1,
            seconds=usage.seconds,
            peak_mem_bytes=usage.peak_mem_bytes,
            cpu_percent=usage.cpu_percent,
        )
        records.append(rec)
        log.info(
            "epoch %d loss %.4f val_loss %.4f val_acc %.4f (%.2fs)",
            rec.epoch, rec.train_loss, rec.val_loss, rec.val_acc, rec.seconds,
        )
        if progress is not None:
            progress(rec)
    return model, records


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def metrics_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for rec in records:
        writer.writerow(rec.csv_row())
    return buf.getvalue()


def write_metrics_csv(path, records) -> None:
    Path(path).write_text(metrics_csv(records))


def final_report(result: EvalResult, model: ModelGraph, records=(), **extra) -> dict:
    doc = result.to_json()
    doc["parameter_count"] = count_parameters(model)
    doc["model_kind"] = model.kind
    if any(r.cpu_percent is not None for r in records):
        doc["cpu_percent_per_epoch"] = [r.cpu_percent for r in records]
    doc.update(extra)
    return doc


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_checkpoint(model: ModelGraph, path) -> None:
    write_params(path, model.named_params())


def load_checkpoint(path, model: ModelGraph) -> ModelGraph:
    """Load parameters into ``model``. Nothing is modified unless every record matches."""
    loaded = read_params(path)
    target = model.named_params()
    if set(loaded) != set(target):
        missing = sorted(set(target) - set(loaded))
        extra = sorted(set(loaded) - set(target))
        raise ShapeMismatch(f"checkpoint does not match architecture (missing {missing}, extra {extra})")
    for name, arr in loaded.items():
        if arr.shape != target[name].shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs model {target[name].shape}")
    for name, arr in loaded.items():
        target[name][...] = arr
    return model


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
