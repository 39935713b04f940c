"""Command-line entry point: ``qhybrid {train,evaluate,attack,analyze,describe,render-circuit}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis, data, qsim, train
from .errors import DivergedLoss, FormatError, ShapeMismatch
from .model import build_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5

DATA_DIR_ENV = "QHYBRID_DATA_DIR"

log = logging.getLogger("qhybrid")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    model: str = "hybrid"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 42
    qubits: int = 4
    layers: int = 2
    epsilon: float = 0.1
    out: str = "runs/latest"
    workers: int = 1
    data_dir: str | None = None
    n_train: int | None = None
    n_test: int | None = None
    val_fraction: float = 0.1
    augment: bool = True
    sample_cpu: bool = False
    checkpoint: str | None = None
    components: int = 2

    def validate(self):
        if self.dataset not in ("mnist", "cifar100", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.model not in ("hybrid", "classical"):
            raise ConfigError(f"unknown model {self.model!r}")
        for name in ("epochs", "batch_size", "qubits", "layers", "workers", "components"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.qubits > qsim.ORACLE_MAX_QUBITS:
            raise ConfigError(f"qubits must be <= {qsim.ORACLE_MAX_QUBITS}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("n_train", "n_test"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            seed=self.seed,
            dataset=self.dataset,
            model=self.model,
            augment=self.augment,
            workers=self.workers,
            sample_cpu=self.sample_cpu,
        )


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_run_config(path, overrides: dict) -> RunConfig:
    """Defaults, then the JSON file, then command-line flags (flags win)."""
    values = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        unknown = sorted(set(doc) - _FIELD_NAMES)
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.data_dir is None:
        cfg.data_dir = os.environ.get(DATA_DIR_ENV)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Data and model plumbing
# ---------------------------------------------------------------------------


def load_splits(cfg: RunConfig):
    """Return (train, val, test) datasets for the configured run."""
    if cfg.dataset == "synthetic":
        n_train = cfg.n_train or 500
        n_test = cfg.n_test or 200
        full = data.synthetic_dataset(10, max(n_train // 10, 1), seed=cfg.seed)
        test = data.synthetic_dataset(10, max(n_test // 10, 1), seed=cfg.seed + 1, split="test")
    else:
        if not cfg.data_dir:
            raise DataError(f"--data-dir or ${DATA_DIR_ENV} is required for {cfg.dataset}")
        try:
            full = data.load_named(cfg.dataset, cfg.data_dir, "train")
            test = data.load_named(cfg.dataset, cfg.data_dir, "test")
        except (OSError, FormatError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        if cfg.n_train:
            full = data.stratified_subset(full, cfg.n_train, seed=cfg.seed)
        if cfg.n_test:
            test = data.stratified_subset(test, cfg.n_test, seed=cfg.seed)
    try:
        train_set, val_set = data.split(full, cfg.val_fraction, seed=cfg.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return train_set, val_set, test


def make_model(cfg: RunConfig, dataset: data.Dataset):
    try:
        return build_model(
            cfg.model, dataset.shape, dataset.n_classes, cfg.qubits, cfg.layers, seed=cfg.seed
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def restore_model(cfg: RunConfig, dataset: data.Dataset):
    model = make_model(cfg, dataset)
    path = Path(cfg.checkpoint or Path(cfg.out) / "model.qhcp")
    try:
        train.load_checkpoint(path, model)
    except (OSError, FormatError, ShapeMismatch) as exc:
        raise CheckpointError(f"cannot load {path} into the {cfg.model} model: {exc}") from exc
    return model


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    train_set, val_set, test_set = load_splits(cfg)
    model = make_model(cfg, train_set)
    out = _out_dir(cfg)
    train.write_json(out / "arch.json", model.describe())
    model, records = train.train_model(cfg.train_config(), model, train_set, val_set)
    result = train.evaluate(model, test_set, workers=cfg.workers)
    train.write_metrics_csv(out / "metrics.csv", records)
    train.save_checkpoint(model, out / "model.qhcp")
    train.write_json(
        out / "final.json",
        train.final_report(result, model, records, split="test", config=asdict(cfg)),
    )
    print(
        f"{cfg.model} on {cfg.dataset}: test accuracy {result.accuracy:.4f}, "
        f"macro-F1 {result.macro_f1:.4f}, {records[-1].seconds:.2f}s last epoch -> {out}"
    )
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    _, _, test_set = load_splits(cfg)
    model = restore_model(cfg, test_set)
    result = train.evaluate(model, test_set, workers=cfg.workers)
    out = _out_dir(cfg)
    train.write_json(out / "final.json", train.final_report(result, model, split="test"))
    print(f"test accuracy {result.accuracy:.4f}, macro-F1 {result.macro_f1:.4f}, loss {result.loss:.4f}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    _, _, test_set = load_splits(cfg)
    model = restore_model(cfg, test_set)
    report = analysis.robustness_report(model, test_set, analysis.AttackConfig(cfg.epsilon))
    out = _out_dir(cfg)
    train.write_json(out / "attack.json", report)
    print(
        f"FGSM eps={cfg.epsilon}: clean accuracy {report['clean_accuracy']:.4f}, "
        f"robust accuracy {report['robust_accuracy']:.4f}"
    )
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    _, _, test_set = load_splits(cfg)
    model = restore_model(cfg, test_set)
    dump = analysis.extract_embeddings(model, test_set)
    k = min(cfg.components, dump.features.shape[1])
    result = analysis.pca_project(dump, k, seed=cfg.seed)
    out = _out_dir(cfg)
    analysis.write_embeddings_csv(out / "embeddings.csv", dump)
    analysis.write_pca(out / "pca.csv", out / "pca.json", dump.labels, result)
    ratios = ", ".join(f"{r:.3f}" for r in result.explained_variance_ratio)
    print(f"PCA on {dump.features.shape[1]}-d features: explained variance ratios [{ratios}]")
    return EXIT_OK


def cmd_describe(cfg: RunConfig) -> int:
    shape, n_classes = {
        "mnist": (data.MNIST_SHAPE, 10),
        "synthetic": (data.MNIST_SHAPE, 10),
        "cifar100": (data.CIFAR_SHAPE, data.CIFAR100_CLASSES),
    }[cfg.dataset]
    try:
        model = build_model(cfg.model, shape, n_classes, cfg.qubits, cfg.layers, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(json.dumps(model.describe(), indent=2))
    return EXIT_OK


def cmd_render_circuit(cfg: RunConfig, weights_path=None) -> int:
    if weights_path:
        try:
            weights = np.atleast_2d(np.asarray(json.loads(Path(weights_path).read_text()), dtype=float))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read weights {weights_path}: {exc}") from exc
    else:
        weights = np.zeros((cfg.layers, cfg.qubits))
    try:
        spec = qsim.CircuitSpec(cfg.qubits, cfg.layers, weights)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sys.stdout.write(qsim.render_circuit(spec))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--dataset", choices=["mnist", "cifar100", "synthetic"])
    p.add_argument("--model", choices=["hybrid", "classical"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--seed", type=int)
    p.add_argument("--qubits", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--data-dir", dest="data_dir", help=f"dataset directory (default ${DATA_DIR_ENV})")
    p.add_argument("--n-train", dest="n_train", type=int, help="stratified training subset size")
    p.add_argument("--n-test", dest="n_test", type=int, help="stratified test subset size")
    p.add_argument("--checkpoint")
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--sample-cpu", dest="sample_cpu", action="store_const", const=True,
                   help="record best-effort CPU utilization per epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qhybrid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("train", "train a model and write metrics, checkpoint and reports"),
        ("evaluate", "evaluate a checkpoint on the test split"),
        ("attack", "FGSM robustness of a checkpoint"),
        ("analyze", "export penultimate features and their PCA projection"),
        ("describe", "print the model architecture as JSON"),
        ("render-circuit", "print the entangler circuit as ASCII"),
    ]:
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        if name == "analyze":
            p.add_argument("--components", type=int)
        if name == "render-circuit":
            p.add_argument("--weights", dest="weights_path", help="JSON nested list of shape [layers, qubits]")
    return parser


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "analyze": cmd_analyze,
    "describe": cmd_describe,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    overrides = {k: v for k, v in vars(args).items() if k in _FIELD_NAMES}
    try:
        cfg = load_run_config(args.config, overrides)
        if args.command == "render-circuit":
            return cmd_render_circuit(cfg, args.weights_path)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
