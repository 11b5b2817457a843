"""Datasets, on-disk formats, and the non-IID client partitioner.

Images live in memory as (N, C, H, W) uint8 and are normalized to
float64 in [0, 1] at batch time. Two real formats are supported (IDX
and the CIFAR-10 binary layout) plus a synthetic generator used by the
tests and the example configs.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from fedreg.errors import ConfigError, DataFormatError
from fedreg.rng import PARTITION, SYNTH, stream


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


def normalize(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 255.0


def batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None,
            with_indices: bool = False):
    """One pass over the dataset in batches; shuffled when rng is given.

    Yields (x, y) with x normalized float64, or (x, y, idx) where idx are
    positions within this dataset (used to look up cached activations).
    The last batch may be short; batches are never padded.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = normalize(dataset.images[idx])
        y = dataset.labels[idx]
        yield (x, y, idx) if with_indices else (x, y)


def augment_flip(x: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Horizontal flip applied per sample with probability p. Returns a copy."""
    out = x.copy()
    mask = rng.random(len(x)) < p
    out[mask] = out[mask][:, :, :, ::-1]
    return out


# partitioning ---------------------------------------------------------------


@dataclass
class Partition:
    client_indices: tuple  # one int64 array per client
    n_samples: int

    @property
    def n_clients(self):
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices])


def dirichlet_partition(labels: np.ndarray, n_clients: int, beta: float, seed: int,
                        min_client_size: int = 2, max_attempts: int = 100) -> Partition:
    """Split sample indices across clients with Dirichlet(beta) class mixing.

    For every class, a proportion vector over clients is drawn from
    Dir(beta * 1) and the class's (shuffled) indices are dealt out by a
    multinomial draw of those proportions. Smaller beta concentrates each
    class on fewer clients. Draws where some client ends up with fewer
    than min_client_size samples are rejected and redrawn wholesale.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if beta <= 0:
        raise ConfigError("beta must be > 0")
    if len(labels) < n_clients * min_client_size:
        raise ConfigError(
            f"{len(labels)} samples cannot give {n_clients} clients "
            f"at least {min_client_size} each"
        )
    rng = stream(seed, PARTITION)
    classes = np.unique(labels)
    for attempt in range(1, max_attempts + 1):
        per_client = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            p = rng.dirichlet(np.full(n_clients, beta))
            counts = rng.multinomial(len(idx), p)
            stop = np.cumsum(counts)
            start = stop - counts
            for i in range(n_clients):
                per_client[i].append(idx[start[i]:stop[i]])
        parts = tuple(
            np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
            for chunks in per_client
        )
        if min(len(p) for p in parts) >= min_client_size:
            return Partition(parts, len(labels))
    raise ConfigError(
        f"no partition with every client >= {min_client_size} samples "
        f"after {max_attempts} attempts (n={len(labels)}, clients={n_clients}, "
        f"beta={beta})"
    )


def partition_class_counts(partition: Partition, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(n_clients, n_classes) matrix of per-client class histograms."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((partition.n_clients, n_classes), dtype=np.int64)
    for i, idx in enumerate(partition.client_indices):
        out[i] = np.bincount(labels[idx], minlength=n_classes)
    return out


# IDX format -----------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def load_idx(path: str) -> np.ndarray:
    """Read one IDX file (the MNIST container format).

    Layout: two zero bytes, a dtype code, the number of dimensions, then
    that many big-endian uint32 sizes, then the elements big-endian.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated header, {len(blob)} bytes at offset 0")
    zeros, code, ndim = blob[:2], blob[2], blob[3]
    if zeros != b"\x00\x00":
        raise DataFormatError(f"{path}: bad magic {blob[:4].hex()} at offset 0")
    if code not in _IDX_DTYPES:
        raise DataFormatError(f"{path}: unknown dtype code 0x{code:02x} at offset 2")
    if ndim < 1:
        raise DataFormatError(f"{path}: zero dimensions at offset 3")
    head_end = 4 + 4 * ndim
    if len(blob) < head_end:
        raise DataFormatError(
            f"{path}: truncated at offset {len(blob)}: dimension list needs "
            f"{head_end} bytes"
        )
    dims = struct.unpack(f">{ndim}I", blob[4:head_end])
    dtype = _IDX_DTYPES[code]
    expected = head_end + int(np.prod(dims)) * dtype.itemsize
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: truncated at offset {len(blob)}: expected {expected} bytes "
            f"for shape {dims}"
        )
    data = np.frombuffer(blob, dtype=dtype, offset=head_end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def save_idx(path: str, array: np.ndarray) -> None:
    codes = {np.dtype(k.newbyteorder("=")): c for c, k in _IDX_DTYPES.items()}
    arr = np.ascontiguousarray(array)
    if arr.dtype not in codes:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX code")
    if arr.ndim < 1 or arr.ndim > 255:
        raise DataFormatError(f"cannot store {arr.ndim}-dimensional array")
    with open(path, "wb") as f:
        f.write(bytes([0, 0, codes[arr.dtype], arr.ndim]))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def load_idx_dataset(images_path: str, labels_path: str, n_classes: int = 10) -> Dataset:
    """Pair of IDX files (images (N,H,W) or (N,C,H,W), labels (N,))."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: labels must be 1-d, got {labels.shape}")
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.ndim != 4:
        raise DataFormatError(f"{images_path}: images must be 3-d or 4-d")
    return Dataset(np.ascontiguousarray(images), labels.astype(np.int64), n_classes)


# CIFAR-10 binary ------------------------------------------------------------

_CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(path: str) -> Dataset:
    """One CIFAR-10 .bin shard: 3073-byte records, label then RGB planes."""
    try:
        size = os.path.getsize(path)
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e
    if size == 0 or size % _CIFAR_RECORD != 0:
        raise DataFormatError(
            f"{path}: {size} bytes is not a multiple of the {_CIFAR_RECORD}-byte record"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label {labels.max()} out of range for CIFAR-10")
    return Dataset(np.ascontiguousarray(images), labels, 10)


def save_cifar_binary(path: str, dataset: Dataset) -> None:
    if dataset.images.shape[1:] != (3, 32, 32) or dataset.images.dtype != np.uint8:
        raise DataFormatError("CIFAR binary needs uint8 images shaped (N, 3, 32, 32)")
    rec = np.empty((len(dataset), _CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = dataset.images.reshape(len(dataset), -1)
    rec.tofile(path)


# synthetic data -------------------------------------------------------------


def synth_dataset(n_train: int, n_test: int, n_classes: int = 4,
                  shape: tuple = (1, 8, 8), noise: float = 32.0,
                  seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-template blobs: one random template per class plus pixel noise.

    Train and test are sliced from a single draw so they share templates.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("need at least one train and one test sample")
    rng = stream(seed, SYNTH)
    templates = rng.uniform(0.0, 255.0, size=(n_classes, *shape))
    n = n_train + n_test
    labels = rng.integers(0, n_classes, size=n)
    images = templates[labels] + rng.normal(0.0, noise, size=(n, *shape))
    images = np.clip(images, 0, 255).astype(np.uint8)
    train = Dataset(images[:n_train], labels[:n_train], n_classes)
    test = Dataset(images[n_train:], labels[n_train:], n_classes)
    return train, test
