"""CIFAR binary ingestion, augmentation and a synthetic stand-in dataset."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, FormatError

logger = logging.getLogger(__name__)

IMAGE_BYTES = 3 * 32 * 32
RECORD_BYTES = {"cifar10": 1 + IMAGE_BYTES, "cifar100": 2 + IMAGE_BYTES}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100}
STANDARD_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
STANDARD_COUNTS = {("cifar10", "train"): 50000, ("cifar10", "test"): 10000,
                   ("cifar100", "train"): 50000, ("cifar100", "test"): 10000}
STATS_FILE = "ge_norm_stats.json"


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) uint8
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    variant: str = "cifar10"
    mean: np.ndarray | None = field(default=None, repr=False)
    std: np.ndarray | None = field(default=None, repr=False)
    classes: int | None = None  # overrides the variant's class count

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return self.classes if self.classes is not None else NUM_CLASSES[self.variant]

    def subset(self, n):
        """First ``n`` records (the on-disk order), keeping normalization constants."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.variant, self.mean, self.std,
                       self.classes)


def _variant(variant):
    v = str(variant).lower().replace("-", "")
    if v not in RECORD_BYTES:
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}")
    return v


def parse_cifar_bytes(raw, variant, path=None):
    """Decode CIFAR records. Returns ``(images, labels)``; uses fine labels for CIFAR-100."""
    variant = _variant(variant)
    rec = RECORD_BYTES[variant]
    if len(raw) == 0:
        raise FormatError("empty CIFAR file", offset=0, path=path)
    if len(raw) % rec:
        whole = len(raw) // rec
        raise FormatError(
            f"truncated record: {len(raw)} bytes is not a multiple of the {rec}-byte record size",
            offset=whole * rec, path=path,
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, rec - IMAGE_BYTES - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES[variant])
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range for {variant}",
                          offset=int(bad[0]) * rec + rec - IMAGE_BYTES - 1, path=path)
    images = arr[:, rec - IMAGE_BYTES:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def _find_files(root, variant, split):
    names = STANDARD_FILES[(variant, split)]
    for base in (root, root / "cifar-10-batches-bin", root / "cifar-100-binary"):
        if all((base / n).exists() for n in names):
            return [base / n for n in names]
    raise FileNotFoundError(f"no {variant} {split} batches ({', '.join(names)}) under {root}")


def load_cifar(path, variant="cifar10", split="train", strict_counts=False, stats=True):
    """Load one split of CIFAR-10/100 from the standard binary batches in ``path``.

    ``strict_counts`` additionally requires the canonical 50k/10k record counts.
    Normalization constants come from the training split and are cached
    next to the data in ``ge_norm_stats.json`` when the directory is writable.
    """
    variant = _variant(variant)
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(path)
    images, labels = [], []
    for f in _find_files(root, variant, split):
        im, lb = parse_cifar_bytes(f.read_bytes(), variant, path=str(f))
        images.append(im)
        labels.append(lb)
    ds = Dataset(np.concatenate(images), np.concatenate(labels), split, variant)
    expected = STANDARD_COUNTS[(variant, split)]
    if strict_counts and len(ds) != expected:
        raise FormatError(f"expected {expected} records, found {len(ds)}",
                          offset=len(ds) * RECORD_BYTES[variant], path=str(root))
    if stats:
        ds.mean, ds.std = normalization_stats(root, variant, ds if split == "train" else None)
    return ds


def channel_stats(images):
    """Per-channel mean and std of uint8 images, on the [0, 1] scale."""
    x = images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalization_stats(root, variant, train=None):
    root = Path(root)
    cache = root / STATS_FILE
    if cache.exists():
        data = json.loads(cache.read_text())
        if variant in data:
            return np.array(data[variant]["mean"]), np.array(data[variant]["std"])
    if train is None:
        train = load_cifar(root, variant, "train", stats=False)
    mean, std = channel_stats(train.images)
    try:
        data = json.loads(cache.read_text()) if cache.exists() else {}
        data[variant] = {"mean": mean.tolist(), "std": std.tolist()}
        cache.write_text(json.dumps(data, indent=2, sort_keys=True))
    except OSError:
        logger.info("could not cache normalization stats in %s", root)
    return mean, std


def encode_cifar(images, labels, variant="cifar10", coarse_labels=None):
    """Inverse of :func:`parse_cifar_bytes`."""
    variant = _variant(variant)
    images = np.asarray(images, dtype=np.uint8).reshape(-1, IMAGE_BYTES)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    cols = [labels, images]
    if variant == "cifar100":
        coarse = np.zeros_like(labels) if coarse_labels is None else np.asarray(coarse_labels, np.uint8).reshape(-1, 1)
        cols = [coarse, labels, images]
    return np.concatenate(cols, axis=1).tobytes()


def write_cifar(path, images, labels, variant="cifar10"):
    Path(path).write_bytes(encode_cifar(images, labels, variant))


# ---------------------------------------------------------------------------
# augmentation

PAD = 4
CROP = 32


def normalize(images, mean, std):
    """uint8 ``(..., 3, H, W)`` to float32 ``(x/255 - mean) / std``."""
    x = images.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    return (x - m) / s


def augment(image, rng, mean, std, offset=None, flip=None):
    """Pad by 4 zero pixels, take a random 32x32 crop of the image or its mirror, normalize.

    ``offset`` ((row, col) in 0..8) and ``flip`` override the random draws.
    The draws always happen, so forcing one does not shift the stream.
    """
    drawn = rng.integers(0, 2 * PAD + 1, size=2)
    drawn_flip = rng.random() < 0.5
    r, c = drawn if offset is None else offset
    do_flip = drawn_flip if flip is None else flip
    padded = np.pad(image, ((0, 0), (PAD, PAD), (PAD, PAD)))
    if do_flip:
        padded = padded[:, :, ::-1]
    crop = padded[:, r : r + CROP, c : c + CROP]
    return normalize(crop, mean, std)


def augment_batch(images, rng, mean, std):
    return np.stack([augment(im, rng, mean, std) for im in images])


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_images(n, num_classes=10, seed=0, noise=40.0):
    """Class-conditional 32x32 colour textures that a small CNN can learn.

    Each class owns a random low-frequency colour pattern; samples add a
    random circular shift, brightness jitter and pixel noise.
    """
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(12345)
    coarse = proto_rng.uniform(40, 215, size=(num_classes, 3, 4, 4))
    protos = coarse.repeat(8, axis=2).repeat(8, axis=3)
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    for i, y in enumerate(labels):
        img = np.roll(protos[y], shift=tuple(rng.integers(-4, 5, size=2)), axis=(1, 2))
        img = img * rng.uniform(0.8, 1.2) + rng.normal(0, noise, size=img.shape)
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def make_synthetic_cifar(root, n_train=1000, n_test=500, variant="cifar10", seed=0):
    """Write a small dataset in the CIFAR binary layout under ``root``."""
    variant = _variant(variant)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    k = NUM_CLASSES[variant]
    tr_x, tr_y = synthetic_images(n_train, k, seed)
    te_x, te_y = synthetic_images(n_test, k, seed + 1)
    train_files = STANDARD_FILES[(variant, "train")]
    chunks = np.array_split(np.arange(n_train), len(train_files))
    for name, idx in zip(train_files, chunks):
        write_cifar(root / name, tr_x[idx], tr_y[idx], variant)
    write_cifar(root / STANDARD_FILES[(variant, "test")][0], te_x, te_y, variant)
    stale = root / STATS_FILE
    if stale.exists():
        os.remove(stale)
    return root
