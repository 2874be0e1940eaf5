"""Datasets: the CIFAR-10 binary reader, synthetic class blobs, batching.

A :class:`DatasetHandle` is immutable once built. Labels are reached only
through :meth:`DatasetHandle.labels_at`, which lets
:class:`LabelAccessCounter` prove that a training path never reads them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, InputError

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10
# published CIFAR-10 training-set channel statistics on the [0, 1] scale
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class DatasetHandle:
    """Images ``(n, C, H, W)`` float32 with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None
    classes: int
    source: str = "synthetic"
    augment: bool = False

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"dataset images must be (n, C, H, W), got {self.images.shape}")
        if self.labels is not None:
            if self.labels.shape != (self.images.shape[0],):
                raise InputError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
                raise InputError(f"labels must lie in [0, {self.classes})")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def item_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def labels_at(self, idx) -> np.ndarray:
        if self.labels is None:
            raise InputError(f"dataset '{self.source}' carries no labels")
        return self.labels[idx]

    def subset(self, idx) -> "DatasetHandle":
        idx = np.asarray(idx, dtype=np.int64)
        return DatasetHandle(
            self.images[idx], None if self.labels is None else self.labels[idx], self.classes, self.source, self.augment
        )

    def with_augment(self, on: bool) -> "DatasetHandle":
        return DatasetHandle(self.images, self.labels, self.classes, self.source, on)

    def without_labels(self) -> "DatasetHandle":
        """Same images in the same order, no label access possible."""
        return DatasetHandle(self.images, None, self.classes, self.source + "+unlabeled", self.augment)


class LabelAccessCounter:
    """Wraps a handle and counts every label read made through it."""

    def __init__(self, inner: DatasetHandle):
        self.inner = inner
        self.label_reads = 0

    def __getattr__(self, name):
        if name == "labels":
            self.label_reads += 1
        return getattr(self.inner, name)

    def labels_at(self, idx) -> np.ndarray:
        self.label_reads += 1
        return self.inner.labels_at(idx)


def standardize(pixels_u8: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    """``(x/255 - mean_c) / std_c`` per channel, as float32."""
    x = pixels_u8.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - m) / s


def load_cifar_binary(paths: Sequence, mean=CIFAR_MEAN, std=CIFAR_STD) -> DatasetHandle:
    """Read CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = np.fromfile(Path(p), dtype=np.uint8)
        if raw.size % CIFAR_RECORD_BYTES:
            raise FormatError(f"{p}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
        recs = raw.reshape(-1, CIFAR_RECORD_BYTES)
        bad = np.flatnonzero(recs[:, 0] > 9)
        if bad.size:
            raise FormatError(f"{p}: record {bad[0]} has label byte {recs[bad[0], 0]} > 9")
        chunks.append(recs)
    recs = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD_BYTES), np.uint8)
    labels = recs[:, 0].astype(np.int64)
    images = standardize(recs[:, 1:].reshape((-1,) + CIFAR_SHAPE), mean, std)
    return DatasetHandle(images, labels, CIFAR_CLASSES, source="cifar_binary")


def cifar_split(root, train: bool = True, mean=CIFAR_MEAN, std=CIFAR_STD) -> DatasetHandle:
    """The training (``data_batch_1..5.bin``) or test (``test_batch.bin``) split under ``root``."""
    root = Path(root)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    paths = [root / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files not found: {missing}")
    return load_cifar_binary(paths, mean, std)


def first_n_per_class(handle: DatasetHandle, per_class: int) -> DatasetHandle:
    """Deterministic subset: the first ``per_class`` items of each class, original order kept."""
    labels = handle.labels_at(slice(None))
    keep = np.concatenate([np.flatnonzero(labels == c)[:per_class] for c in range(handle.classes)])
    return handle.subset(np.sort(keep))


def synthetic_dataset(
    seed: int,
    n: int,
    classes: int,
    shape: tuple[int, int, int] = (3, 8, 8),
    margin: float = 4.0,
    noise: float = 1.0,
) -> DatasetHandle:
    """Gaussian class blobs: image = class prototype + noise.

    Prototypes are random directions of norm ``margin * noise``, so larger
    margins make the classes easier to separate. Labels are balanced
    (counts differ by at most one) and shuffled.
    """
    if n < classes:
        raise InputError(f"synthetic_dataset: n={n} < classes={classes}")
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    protos = rng.standard_normal((classes, d))
    protos *= margin * noise / np.linalg.norm(protos, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % classes)
    x = protos[labels] + noise * rng.standard_normal((n, d))
    return DatasetHandle(x.reshape((n,) + tuple(shape)).astype(np.float32), labels.astype(np.int64), classes)


def _augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus ``pad``-pixel zero-pad-and-crop."""
    B, _, H, W = x.shape
    flip = rng.random(B) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, B)
    dx = rng.integers(0, 2 * pad + 1, B)
    return np.stack([padded[i, :, dy[i] : dy[i] + H, dx[i] : dx[i] + W] for i in range(B)])


def batch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)


def batches(
    handle: DatasetHandle,
    batch_size: int,
    shuffle_seed: int | None = None,
    drop_labels: bool = False,
    epoch: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    """Yield ``(x, labels)`` batches; ``labels`` is None when ``drop_labels``.

    The order is a deterministic permutation per ``(shuffle_seed, epoch)``
    (identity when the seed is None). The last partial batch is kept.
    Augmentation, when the handle enables it, uses the same seed stream.
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = batch_order(handle.n, shuffle_seed, epoch)
    aug_rng = np.random.default_rng([int(shuffle_seed or 0), int(epoch), 1]) if handle.augment else None
    for lo in range(0, handle.n, batch_size):
        idx = order[lo : lo + batch_size]
        x = handle.images[idx]
        if aug_rng is not None:
            x = _augment(x, aug_rng)
        y = None if drop_labels else handle.labels_at(idx)
        yield x, y
