"""Dataset ingestion: CIFAR binary files, toy blobs and dumped synthetic batches."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import structlog

from utils.errors import ConfigError, DataError
from utils.helpers import rng_stream

log = structlog.get_logger(__name__)

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_FILES = {
    ("cifar10-binary", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10-binary", "test"): ["test_batch.bin"],
    ("cifar100-binary", "train"): ["train.bin"],
    ("cifar100-binary", "test"): ["test.bin"],
}


@dataclass
class Dataset:
    """Images N x 3 x H x W (float32, normalized) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.name}: {self.images.shape} images do not match {self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def iterate_batches(dataset, batch_size, rng=None):
    """Yield (images, labels) batches in order, or shuffled when `rng` is given. The last batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def _normalize(pixels, mean, std):
    x = pixels.astype(np.float32) / 255.0
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return (x - mean) / std


def _read_records(path, label_bytes, label_offset):
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + CIFAR_IMAGE_BYTES
    if raw.size == 0:
        raise DataError(f"{path}: file is empty")
    if raw.size % record:
        full = raw.size // record
        raise DataError(f"{path}: truncated record {full} at byte offset {full * record} "
                        f"({raw.size - full * record} of {record} bytes present)")
    records = raw.reshape(-1, record)
    labels = records[:, label_offset].astype(np.int64)
    pixels = records[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels


def _binary_files(path, kind, split):
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"Dataset path not found: {path}")
    files = [path / name for name in CIFAR_FILES[(kind, split)]]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise DataError(f"Missing {kind} {split} files: {', '.join(missing)}")
    return files


def _load_cifar(path, split, kind, label_bytes, label_offset, num_classes, mean, std):
    pixels, labels = [], []
    for f in _binary_files(path, kind, split):
        p, l = _read_records(f, label_bytes, label_offset)
        pixels.append(p)
        labels.append(l)
    pixels = np.concatenate(pixels)
    labels = np.concatenate(labels)
    if labels.max() >= num_classes:
        raise DataError(f"{path}: label byte {labels.max()} outside 0..{num_classes - 1}")
    log.info("cifar_loaded", kind=kind, split=split, samples=int(labels.size))
    return Dataset(_normalize(pixels, mean, std), labels, num_classes, name=f"{kind}:{split}")


def load_cifar10_binary(path, split="train", mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    """
    Read CIFAR-10 binary records (1 label byte + 3072 CHW pixel bytes).

    Args:
        path: A single .bin file or the `cifar-10-batches-bin` directory.
        split: "train" (data_batch_1..5) or "test" (test_batch) when `path` is a directory.
    """
    return _load_cifar(path, split, "cifar10-binary", 1, 0, 10, mean, std)


def load_cifar100_binary(path, split="train", mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    """CIFAR-100 binary records (coarse byte, fine byte, 3072 pixels); fine labels are used."""
    return _load_cifar(path, split, "cifar100-binary", 2, 1, 100, mean, std)


def _class_colors(num_classes):
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    return np.stack([np.cos(angles), np.cos(angles - 2 * np.pi / 3), np.cos(angles + 2 * np.pi / 3)], axis=1)


def make_toy_blobs(num_classes=3, per_class=200, image_size=32, seed=0, split="train"):
    """
    Class-colored Gaussian blobs with positional jitter, in [-1, 1].

    Each class has its own hue; blob position, width and pixel noise vary per
    sample. Train and test splits come from disjoint seed streams.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    rng = rng_stream(seed, "toy-blobs", 0 if split == "train" else 1)
    colors = _class_colors(num_classes)
    labels = np.repeat(np.arange(num_classes), per_class)
    n = labels.size

    coords = np.arange(image_size) - (image_size - 1) / 2.0
    jitter = rng.uniform(-image_size / 8, image_size / 8, size=(n, 2))
    sigma = rng.uniform(image_size / 8, image_size / 5, size=(n, 1, 1))
    dy = coords[None, :, None] - jitter[:, 0, None, None]
    dx = coords[None, None, :] - jitter[:, 1, None, None]
    bump = np.exp(-(dy**2 + dx**2) / (2 * sigma**2))

    images = bump[:, None] * colors[labels][:, :, None, None] + (bump[:, None] - 1.0) * 0.5
    images += rng.normal(0.0, 0.05, size=images.shape)
    images = np.clip(images, -1.0, 1.0).astype(np.float32)

    order = rng.permutation(n)
    log.info("toy_blobs_built", classes=num_classes, samples=n, image_size=image_size, split=split)
    return Dataset(images[order], labels[order].astype(np.int64), num_classes, name=f"toy-blobs:{split}")


def load_dumped_synthetic(path):
    from services.synthetic_dump import load_dump

    images, labels, manifest = load_dump(path)
    return Dataset(images, labels, manifest["num_classes"], name=f"synthetic:{Path(path).name}")


def load_dataset(source, num_classes, image_size=32, seed=0, split=None):
    """Dataset for a `DatasetSource` config section; `split` overrides `source.split`."""
    split = split or source.split
    if source.kind == "toy-blobs":
        per_class = source.per_class if split == "train" else source.test_per_class
        data = make_toy_blobs(num_classes, per_class, image_size, seed, split)
    elif source.kind == "cifar10-binary":
        data = load_cifar10_binary(source.path, split, source.mean, source.std)
    elif source.kind == "cifar100-binary":
        data = load_cifar100_binary(source.path, split, source.mean, source.std)
    else:
        data = load_dumped_synthetic(source.path)
    if len(data) == 0:
        raise DataError(f"{data.name} is empty")
    if data.num_classes != num_classes:
        raise ConfigError(f"{data.name} has {data.num_classes} classes, model expects {num_classes}")
    if data.images.shape[2:] != (image_size, image_size):
        raise ConfigError(f"{data.name} images are {data.images.shape[2:]}, model expects {image_size}x{image_size}")
    return data
