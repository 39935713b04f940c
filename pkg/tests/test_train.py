import csv
import io
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qhybrid import data, train
from qhybrid.errors import BadMagic, DivergedLoss, EmptySplit, FormatError, ShapeMismatch
from qhybrid.model import build_classical, build_hybrid
from qhybrid.train import EpochRecord, TrainConfig


def small_splits(n_classes=4, seed=0):
    ds = data.synthetic_dataset(n_classes=n_classes, n_per_class=24, seed=seed, noise=0.05)
    return data.split(ds, 0.2, seed=seed)


def quick_config(**kw):
    base = dict(epochs=5, batch_size=16, lr=0.02, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# =============================================================================
# Config
# =============================================================================


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.optimizer, cfg.workers) == (50, 64, "adam", 1)


@pytest.mark.parametrize("field,value", [("epochs", 0), ("batch_size", 0), ("lr", 0.0), ("workers", 0)])
def test_config_rejects(field, value):
    with pytest.raises(ValueError):
        TrainConfig(**{field: value})


# =============================================================================
# Metrics
# =============================================================================


def test_binary_f1_half():
    # per class: TP=1, FP=1, FN=1, TN=1
    preds = np.array([0, 1, 1, 0])
    labels = np.array([0, 0, 1, 1])
    _, _, f1 = train.per_class_scores(preds, labels, 2)
    assert np.allclose(f1, [0.5, 0.5])
    assert train.classification_metrics(preds, labels, 2).macro_f1 == 0.5


def test_perfect_predictions():
    labels = np.arange(10).repeat(3)
    res = train.classification_metrics(labels, labels, 10)
    assert res.accuracy == 1.0 and res.macro_f1 == 1.0
    assert np.array_equal(res.confusion, np.diag(np.full(10, 3)))


def test_constant_predictor():
    labels = np.arange(10).repeat(5)
    res = train.classification_metrics(np.zeros_like(labels), labels, 10)
    assert res.accuracy == pytest.approx(0.1, abs=1e-15)


def test_absent_classes_flagged():
    res = train.classification_metrics(np.array([0, 1]), np.array([0, 1]), 3)
    assert res.absent_classes == [2] and res.per_class_f1[2] == 0.0
    doc = res.to_json()
    assert doc["f1_average"] == "macro" and doc["absent_classes"] == [2]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 12), n=st.integers(1, 200))
def test_metric_identities(seed, k, n):
    rng = np.random.default_rng(seed)
    preds, labels = rng.integers(0, k, n), rng.integers(0, k, n)
    res = train.classification_metrics(preds, labels, k)
    cm = res.confusion
    assert cm.sum() == n
    assert np.array_equal(cm.sum(axis=1), np.bincount(labels, minlength=k))
    assert abs(res.accuracy - np.trace(cm) / n) < 1e-12
    diag, rows, cols = np.diag(cm), cm.sum(axis=1), cm.sum(axis=0)
    recall = np.divide(diag, rows, out=np.zeros(k), where=rows > 0)
    precision = np.divide(diag, cols, out=np.zeros(k), where=cols > 0)
    p, r, _ = train.per_class_scores(preds, labels, k)
    assert np.max(np.abs(p - precision)) < 1e-12 and np.max(np.abs(r - recall)) < 1e-12


def test_evaluate_empty_split():
    ds = data.synthetic_dataset(n_classes=2, n_per_class=1)
    with pytest.raises(EmptySplit):
        train.evaluate(build_hybrid((1, 28, 28), 2), ds.subset([]))


# =============================================================================
# Resource logging
# =============================================================================


def test_resource_log_sleep():
    seconds, mem = train.resource_log(lambda: time.sleep(0.01))
    assert seconds >= 0.010
    assert mem is None or mem > 0


def test_resource_log_nested():
    inner = []

    def outer():
        inner.append(train.resource_log(lambda: time.sleep(0.005))[0])

    seconds, _ = train.resource_log(outer)
    assert seconds >= inner[0]


def test_memory_unsupported_is_absent(monkeypatch):
    monkeypatch.setattr(train, "resource", None)
    assert train.peak_memory_bytes() is None
    _, mem = train.resource_log(lambda: None)
    assert mem is None
    rec = EpochRecord(1, 0.5, 0.5, 1.0, 1.0, 0.25, None)
    assert rec.csv_row()[-1] == ""


def test_cpu_sampler_optional():
    with train.measure(sample_cpu=True) as usage:
        sum(range(100_000))
    assert usage.cpu_percent is not None and usage.cpu_percent >= 0
    with train.measure() as usage:
        pass
    assert usage.cpu_percent is None


# =============================================================================
# Training loop
# =============================================================================


def test_training_reaches_full_train_accuracy():
    tr, va = small_splits()
    model, records = train.train_model(quick_config(), build_hybrid((1, 28, 28), 4, seed=0), tr, va)
    assert len(records) == 5
    assert train.evaluate(model, tr).accuracy == 1.0
    for rec in records:
        assert 0 <= rec.val_acc <= 1 and 0 <= rec.val_f1 <= 1 and rec.seconds > 0


def test_training_deterministic():
    tr, va = small_splits()
    runs = []
    for _ in range(2):
        _, recs = train.train_model(quick_config(epochs=2), build_hybrid((1, 28, 28), 4, seed=1), tr, va)
        runs.append([(r.train_loss, r.val_loss, r.val_acc, r.val_f1) for r in recs])
    assert runs[0] == runs[1]


def test_parallel_workers_match_serial():
    tr, va = small_splits()
    cfg = dict(epochs=1, batch_size=24)
    _, a = train.train_model(quick_config(**cfg), build_hybrid((1, 28, 28), 4, seed=2), tr, va)
    _, b = train.train_model(quick_config(workers=3, **cfg), build_hybrid((1, 28, 28), 4, seed=2), tr, va)
    assert abs(a[0].train_loss - b[0].train_loss) < 1e-10


def test_validation_data_not_augmented():
    tr, va = small_splits()
    before = va.images.copy()
    train.train_model(quick_config(epochs=1, dataset="mnist"), build_hybrid((1, 28, 28), 4), tr, va)
    assert np.array_equal(va.images, before)
    model = build_hybrid((1, 28, 28), 4)
    a, b = train.evaluate(model, va), train.evaluate(model, va)
    assert a.loss == b.loss and np.array_equal(a.confusion, b.confusion)


def test_empty_train_split():
    tr, va = small_splits()
    with pytest.raises(EmptySplit):
        train.train_model(quick_config(), build_hybrid((1, 28, 28), 4), tr.subset([]), va)


def test_diverged_loss():
    tr, va = small_splits()
    tr.images[0] = np.nan
    with pytest.raises(DivergedLoss, match="epoch 1"):
        train.train_model(quick_config(augment=False), build_classical((1, 28, 28), 4), tr, va)


def test_progress_callback():
    tr, va = small_splits()
    seen = []
    train.train_model(quick_config(epochs=2), build_hybrid((1, 28, 28), 4), tr, va, progress=seen.append)
    assert [r.epoch for r in seen] == [1, 2]


# =============================================================================
# Output files
# =============================================================================


def test_metrics_csv_layout(tmp_path):
    recs = [EpochRecord(1, 0.5, 0.25, 0.75, 0.5, 1.5, 1024), EpochRecord(2, 0.1, 0.2, 1.0, 1.0, 1.0, None)]
    path = tmp_path / "metrics.csv"
    train.write_metrics_csv(path, recs)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    assert ",".join(rows[0]) == "epoch,train_loss,val_loss,val_acc,val_f1,seconds,peak_mem_bytes"
    assert rows[1] == ["1", "0.5", "0.25", "0.75", "0.5", "1.500000", "1024"]
    assert rows[2][-1] == "" and len(rows) == 3


def test_final_report_fields():
    model = build_hybrid((1, 28, 28), 2)
    res = train.classification_metrics(np.array([0, 1]), np.array([0, 1]), 2, loss=0.1)
    doc = train.final_report(res, model)
    for key in ("accuracy", "precision", "recall", "f1", "confusion_matrix", "parameter_count"):
        assert key in doc
    assert doc["parameter_count"] == 13808 + 8 + 10


# =============================================================================
# Checkpoints
# =============================================================================


def test_checkpoint_round_trip(tmp_path):
    tr, va = small_splits()
    model, _ = train.train_model(quick_config(epochs=1), build_hybrid((1, 28, 28), 4, seed=3), tr, va)
    path = tmp_path / "model.qhcp"
    train.save_checkpoint(model, path)
    fresh = train.load_checkpoint(path, build_hybrid((1, 28, 28), 4, seed=99))
    for name, p in model.named_params().items():
        assert np.array_equal(p, fresh.named_params()[name])
    a, b = train.evaluate(model, va), train.evaluate(fresh, va)
    assert a.loss == b.loss and a.accuracy == b.accuracy and np.array_equal(a.confusion, b.confusion)


def test_truncated_checkpoint_leaves_model_untouched(tmp_path):
    path = tmp_path / "model.qhcp"
    train.save_checkpoint(build_hybrid((1, 28, 28), 4, seed=0), path)
    path.write_bytes(path.read_bytes()[:-16])
    target = build_hybrid((1, 28, 28), 4, seed=1)
    before = {k: v.copy() for k, v in target.named_params().items()}
    with pytest.raises(FormatError):
        train.load_checkpoint(path, target)
    assert all(np.array_equal(before[k], v) for k, v in target.named_params().items())


def test_checkpoint_wrong_architecture(tmp_path):
    path = tmp_path / "model.qhcp"
    train.save_checkpoint(build_hybrid((1, 28, 28), 4), path)
    with pytest.raises(ShapeMismatch):
        train.load_checkpoint(path, build_classical((1, 28, 28), 4))
    with pytest.raises(ShapeMismatch):
        train.load_checkpoint(path, build_hybrid((1, 28, 28), 10))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.qhcp"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(BadMagic):
        train.load_checkpoint(path, build_hybrid((1, 28, 28), 4))
