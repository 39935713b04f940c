"""Dataset loading (MNIST IDX, CIFAR-100 binary, synthetic), preprocessing and batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagic, CountMismatch, EmptySplit, LabelOutOfRange, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 2 + 3 * 32 * 32
CIFAR100_CLASSES = 100

MNIST_SHAPE = (1, 28, 28)
CIFAR_SHAPE = (3, 32, 32)

# per-channel (mean, std) in raw [0, 1] pixel units
NORMALIZATION = {
    MNIST_SHAPE: ((0.1307,), (0.3081,)),
    CIFAR_SHAPE: ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

# train-split augmentation per dataset; flips only make sense for natural RGB images
AUGMENT_POLICY = {
    "mnist": {"flip": False, "crop_pad": 4},
    "cifar100": {"flip": True, "crop_pad": 4},
    "synthetic": {"flip": False, "crop_pad": 0},
}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR100_FILES = {"train": "train.bin", "test": "test.bin"}


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W], raw values in [0, 1]
    labels: np.ndarray
    class_names: list[str]
    split: str = "train"
    mean: tuple = ()
    std: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise CountMismatch(
                f"{len(self.images)} images vs {len(self.labels)} labels (images {self.images.shape})"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.n_classes})")
        if not self.mean:
            self.mean, self.std = NORMALIZATION.get(
                self.shape, ((0.5,) * self.shape[0], (0.5,) * self.shape[0])
            )

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices, split=None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self, images=self.images[idx], labels=self.labels[idx], split=split or self.split
        )


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int):
    buf = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise TruncatedFile(f"{path}: shorter than the IDX magic")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(buf) < header:
        raise TruncatedFile(f"{path}: header needs {header} bytes, file has {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise TruncatedFile(f"{path}: header claims {count} data bytes, file has {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, split="train") -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    if len(labels) and labels.max() > 9:
        raise LabelOutOfRange(f"{labels_path}: MNIST label {labels.max()} > 9")
    return Dataset(
        images[:, None].astype(np.float64) / 255.0,
        labels.astype(np.int64),
        [str(d) for d in range(10)],
        split,
    )


def load_cifar100_binary(path, split="train", class_names=None) -> Dataset:
    """Records are <coarse label><fine label><3072 RGB-planar bytes>; fine labels are used."""
    buf = Path(path).read_bytes()
    n, rem = divmod(len(buf), CIFAR_RECORD_BYTES)
    if rem:
        raise TruncatedFile(f"{path}: {len(buf)} bytes is not a multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    fine = records[:, 1].astype(np.int64)
    if n and fine.max() >= CIFAR100_CLASSES:
        raise LabelOutOfRange(f"{path}: fine label {fine.max()} >= {CIFAR100_CLASSES}")
    images = records[:, 2:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    names = list(class_names) if class_names else [f"class_{i}" for i in range(CIFAR100_CLASSES)]
    return Dataset(images, fine, names, split)


def load_named(name: str, data_dir, split: str) -> Dataset:
    """Load the standard file layout for ``mnist`` or ``cifar100`` from ``data_dir``."""
    root = Path(data_dir)
    if name == "mnist":
        img, lab = MNIST_FILES[split]
        return load_mnist_idx(_require(root / img), _require(root / lab), split)
    if name == "cifar100":
        base = root / "cifar-100-binary" if (root / "cifar-100-binary").is_dir() else root
        names_file = base / "fine_label_names.txt"
        names = names_file.read_text().split() if names_file.exists() else None
        return load_cifar100_binary(_require(base / CIFAR100_FILES[split]), split, names)
    raise ValueError(f"unknown dataset {name!r}")


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return path


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _blob_centers(n_classes: int, h: int, w: int) -> np.ndarray:
    side = int(np.ceil(np.sqrt(n_classes)))
    ys = np.linspace(0.2 * h, 0.8 * h, side)
    xs = np.linspace(0.2 * w, 0.8 * w, side)
    grid = np.array([(y, x) for y in ys for x in xs])
    return grid[:n_classes]


def synthetic_dataset(
    n_classes=10, n_per_class=50, shape=MNIST_SHAPE, seed=0, noise=0.1, blob_width=2.5, split="train"
) -> Dataset:
    """Each class is a Gaussian blob at a fixed class-specific position plus pixel noise.

    Blob positions depend only on the class index, so datasets drawn with
    different seeds share the same classes.
    """
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    centers = _blob_centers(n_classes, h, w)
    protos = np.exp(
        -((yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2)
        / (2 * blob_width**2)
    )
    # RGB images get a class-dependent channel tint
    tint = 0.6 + 0.4 * np.cos(np.arange(n_classes)[:, None] + 2.1 * np.arange(c)[None, :])
    labels = rng.permutation(np.repeat(np.arange(n_classes), n_per_class))
    images = tint[labels][:, :, None, None] * protos[labels][:, None]
    images = np.clip(images + noise * rng.standard_normal(images.shape), 0.0, 1.0)
    return Dataset(images, labels, [f"blob_{i}" for i in range(n_classes)], split)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _channel(v, ndim):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape((-1,) + (1,) * 2) if ndim == 3 else v.reshape((1, -1, 1, 1))


def normalize(images, mean, std) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return (x - _channel(mean, x.ndim)) / _channel(std, x.ndim)


def denormalize(images, mean, std) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x * _channel(std, x.ndim) + _channel(mean, x.ndim)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


def random_crop(image: np.ndarray, pad: int, dy: int, dx: int) -> np.ndarray:
    h, w = image.shape[-2:]
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    return padded[:, dy : dy + h, dx : dx + w]


def augment(image, seed, flip=None, crop_pad=4) -> np.ndarray:
    """Random horizontal flip (p=0.5) and random crop from a reflection-padded copy.

    ``flip=None`` enables flipping for 3-channel images only.
    """
    image = np.asarray(image, dtype=np.float64)
    return _augment_one(image, np.random.default_rng(seed), flip, crop_pad)


def _augment_one(image, rng, flip, crop_pad):
    if flip is None:
        flip = image.shape[0] == 3
    if flip and rng.random() < 0.5:
        image = hflip(image)
    if crop_pad:
        dy, dx = rng.integers(0, 2 * crop_pad + 1, size=2)
        image = random_crop(image, crop_pad, dy, dx)
    return np.ascontiguousarray(image)


def augment_batch(images, rng: np.random.Generator, flip=False, crop_pad=4) -> np.ndarray:
    if not flip and not crop_pad:
        return images
    return np.stack([_augment_one(img, rng, flip, crop_pad) for img in images])


# ---------------------------------------------------------------------------
# Splits and batching
# ---------------------------------------------------------------------------


def _stratified_take(labels, n_take: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``n_take`` indices with per-class counts proportional to class size.

    Largest-remainder rounding keeps the total exact and each class within one
    sample of its proportional share.
    """
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    sizes = np.array([len(m) for m in members], dtype=np.float64)
    quota = sizes * n_take / len(labels)
    counts = np.floor(quota).astype(int)
    short = n_take - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:short]] += 1
    taken, rest = [], []
    for m, k in zip(members, counts):
        m = rng.permutation(m)
        taken.append(m[:k])
        rest.append(m[k:])
    return np.sort(np.concatenate(taken)), np.sort(np.concatenate(rest))


def split(dataset: Dataset, val_fraction=0.1, seed=0) -> tuple[Dataset, Dataset]:
    """Stratified, disjoint train/val split, deterministic per seed."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    n_val = int(round(len(dataset) * val_fraction))
    val_idx, train_idx = _stratified_take(dataset.labels, n_val, np.random.default_rng(seed))
    if len(val_idx) == 0 or len(train_idx) == 0:
        raise EmptySplit(
            f"split of {len(dataset)} samples at {val_fraction} leaves an empty side"
        )
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


def stratified_subset(dataset: Dataset, n: int, seed=0) -> Dataset:
    if n >= len(dataset):
        return dataset
    idx, _ = _stratified_take(dataset.labels, n, np.random.default_rng(seed))
    return dataset.subset(idx)


@dataclass
class BatchIterator:
    n_samples: int
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True
    drop_last: bool = False
    _epoch: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def epoch_order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(self.n_samples)
        return np.random.default_rng([self.seed, epoch]).permutation(self.n_samples)

    def batches(self, epoch: int):
        order = self.epoch_order(epoch)
        stop = len(order) - len(order) % self.batch_size if self.drop_last else len(order)
        for start in range(0, stop, self.batch_size):
            yield order[start : start + self.batch_size]

    def __iter__(self):
        epoch, self._epoch = self._epoch, self._epoch + 1
        return self.batches(epoch)
