"""Dataset loading, synthetic fixtures, and deterministic batch iteration.

Inputs always live in [0,1] in raw pixel units; any per-channel
normalization belongs to the model as a fixed affine layer, so perturbation
budgets stay meaningful. Loaders parse the two classic on-disk formats
(big-endian IDX, 3073-byte CIFAR-10 records) plus this package's own binary
container for prebuilt fixtures. A dataset's identity is a 64-bit FNV-1a
digest over its canonical array bytes, computed lazily and cached.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import ContractError, FormatError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


@dataclass
class Dataset:
    name: str
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    _digest: str | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"inputs ({self.inputs.shape[0]}) and labels ({self.labels.shape}) disagree on sample count")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ContractError(f"inputs must lie in [0,1], found range "
                                f"[{self.inputs.min():.4g}, {self.inputs.max():.4g}]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ContractError(f"labels out of range for {self.classes} classes")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def digest(self) -> str:
        """FNV-1a 64 over shape header + input bytes + label bytes, as hex."""
        if self._digest is None:
            head = ("x".join(str(d) for d in self.inputs.shape) + f";c{self.classes};").encode()
            self._digest = format(fnv1a64(head + self.inputs.tobytes() + self.labels.tobytes()), "016x")
        return self._digest

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.name, self.inputs[idx], self.labels[idx], self.classes)


def _read_idx(path, expect_magic, what):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated before magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x} for {what}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) != count:
        raise FormatError(f"{path}: expected {count} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse the classic big-endian IDX pair into a 10-class image dataset."""
    images = _read_idx(images_path, 0x00000803, "images")
    labels = _read_idx(labels_path, 0x00000801, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"image count {images.shape[0]} != label count {labels.shape[0]}")
    n, h, w = images.shape
    inputs = (images.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    if labels.max(initial=0) > 9:
        raise FormatError(f"label byte {labels.max()} outside 0-9")
    return Dataset("mnist", inputs, labels.astype(np.int64), 10)


def load_cifar10_bin(dir_path, split="train") -> Dataset:
    """Parse the 3073-byte-record binary batches from a directory."""
    if split == "train":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        names = ["test_batch.bin"]
    else:
        raise ContractError(f"split must be 'train' or 'test', got {split!r}")
    paths = [os.path.join(dir_path, n) for n in names]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"missing batch files: {', '.join(missing)}")
    record = 3073
    all_labels, all_images = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % record:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {record}-byte records")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels = arr[:, 0]
        if labels.max(initial=0) > 9:
            raise FormatError(f"{path}: label byte {labels.max()} outside 0-9")
        all_labels.append(labels.astype(np.int64))
        all_images.append(arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(f"cifar10-{split}", np.concatenate(all_images), np.concatenate(all_labels), 10)


def make_synthetic_blobs(n_per_class, classes, spread, seed, dim=8) -> Dataset:
    """Gaussian clusters at fixed per-class centers, clamped into [0,1]^dim.

    Centers depend only on (classes, dim), never on seed, so different seeds
    resample the same task.
    """
    n_per_class, classes, dim = int(n_per_class), int(classes), int(dim)
    if n_per_class < 1 or classes < 2 or dim < 1:
        raise ContractError(f"need n_per_class>=1, classes>=2, dim>=1; got {n_per_class}, {classes}, {dim}")
    centers = 0.2 + 0.6 * np.random.default_rng(97).random((classes, dim))
    rng = np.random.default_rng(seed)
    inputs = np.clip(
        np.repeat(centers, n_per_class, axis=0) + spread * rng.standard_normal((classes * n_per_class, dim)),
        0.0, 1.0)
    labels = np.repeat(np.arange(classes), n_per_class)
    return Dataset("blobs", inputs.astype(np.float32), labels, classes)


def batches(dataset: Dataset, batch_size, shuffle=True, seed=0, epoch=0):
    """Yield (inputs, labels) minibatches; the final partial batch is kept.

    The shuffle permutation is a pure function of (seed, epoch).
    """
    batch_size = int(batch_size)
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = (np.random.default_rng([int(seed), int(epoch)]).permutation(n)
             if shuffle else np.arange(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]


def save_dataset(path, dataset: Dataset):
    """Store a dataset as a binary container fixture (labels cast to float32)."""
    write_container(path, f"dataset;name={dataset.name};classes={dataset.classes}", {
        "inputs": dataset.inputs,
        "labels": dataset.labels.astype(np.float32),
    })


def load_dataset(path) -> Dataset:
    name, arrays = read_container(path)
    parts = dict(p.split("=", 1) for p in name.split(";")[1:] if "=" in p)
    if not name.startswith("dataset;") or "classes" not in parts:
        raise FormatError(f"{path}: container {name!r} is not a dataset fixture")
    labels = arrays["labels"]
    if not np.all(labels == np.round(labels)):
        raise FormatError(f"{path}: labels are not integral")
    return Dataset(parts.get("name", "fixture"), arrays["inputs"], labels.astype(np.int64), int(parts["classes"]))
