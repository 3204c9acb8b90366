"""Dataset readers (MNIST IDX, CIFAR-10 binary) and the batch iterator.

Images come back as float32 (N, C, H, W) normalized with per-channel
statistics of the training split. Shuffling and augmentation draw from a
generator seeded by ``(seed, epoch)``, so a given seed always produces the
same batch sequence.
"""
from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
DATASET_KINDS = ("mnist_idx", "cifar10_bin")
NUM_CLASSES = 10
CROP_PAD = 2


class DataError(ValueError):
    """A dataset file is missing, malformed or inconsistent."""


@dataclass
class DatasetSource:
    kind: str
    path: str | Path
    split: str = "train"
    pad_crop: bool = False
    flip: bool = False

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise DataError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.split not in ("train", "test"):
            raise DataError(f"unknown split {self.split!r}")
        self.path = Path(self.path)


@dataclass
class ArrayDataset:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)

    def __len__(self) -> int:
        return len(self.labels)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(raw: bytes, expected_magic: int, name: str = "<bytes>") -> np.ndarray:
    """Decode an IDX file of unsigned bytes (big-endian header)."""
    if len(raw) < 4:
        raise DataError(f"{name}: truncated at byte offset {len(raw)}: header needs 4 bytes")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataError(f"{name}: bad magic at byte offset 0: expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{name}: truncated at byte offset {len(raw)}: header needs {header} bytes")
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise DataError(f"{name}: truncated at byte offset {len(raw)}: expected {need} bytes for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def _find(root: Path, stems: list[str]) -> Path:
    for stem in stems:
        for candidate in (root / stem, root / f"{stem}.gz"):
            if candidate.is_file():
                return candidate
    raise DataError(f"none of {stems} (optionally .gz) found in {root}")


def load_mnist(root: str | Path, split: str = "train") -> ArrayDataset:
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    img_path = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lbl_path = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    images = parse_idx(_read_bytes(img_path), MNIST_IMAGE_MAGIC, img_path.name)
    labels = parse_idx(_read_bytes(lbl_path), MNIST_LABEL_MAGIC, lbl_path.name)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{img_path.name} has {images.shape[0]} images but {lbl_path.name} has {labels.shape[0]} labels")
    _check_labels(labels, lbl_path.name)
    return ArrayDataset(images[:, None, :, :], labels.astype(np.int64))


def parse_cifar_batch(raw: bytes, name: str = "<bytes>") -> ArrayDataset:
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD
        raise DataError(
            f"{name}: truncated record at byte offset {full * CIFAR_RECORD}: "
            f"file size {len(raw)} is not a multiple of {CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    _check_labels(labels, name)
    return ArrayDataset(rec[:, 1:].reshape(-1, 3, 32, 32), labels)


def load_cifar10(root: str | Path, split: str = "train") -> ArrayDataset:
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    stems = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [parse_cifar_batch(_read_bytes(p), p.name) for p in (_find(root, [s]) for s in stems)]
    return ArrayDataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def _check_labels(labels: np.ndarray, name: str) -> None:
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DataError(f"{name}: label {labels[bad]} at record {bad} is outside [0, {NUM_CLASSES})")


def load_arrays(src: DatasetSource) -> ArrayDataset:
    if src.kind == "mnist_idx":
        return load_mnist(src.path, src.split)
    return load_cifar10(src.path, src.split)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of uint8 images, on the [0, 1] scale."""
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-8).astype(np.float32)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images.astype(np.float32) / np.float32(255.0)
    return (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)


def pad_crop(x: np.ndarray, rng: np.random.Generator, pad: int = CROP_PAD) -> np.ndarray:
    """Zero-pad every side by ``pad`` and take a random crop of the original size."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(x)
    for oy in range(2 * pad + 1):
        for ox in range(2 * pad + 1):
            sel = (dy == oy) & (dx == ox)
            if sel.any():
                out[sel] = padded[sel, :, oy:oy + h, ox:ox + w]
    return out


def random_flip(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(x.shape[0]) < 0.5
    out = x.copy()
    out[flip] = out[flip, :, :, ::-1]
    return out


class BatchLoader:
    """Normalized mini-batches over one split.

    ``epoch(e)`` yields ``(images, labels)``; with ``shuffle`` the order and
    augmentation come from ``default_rng([seed, e])``.
    """

    def __init__(self, data: ArrayDataset, batch: int, mean: np.ndarray, std: np.ndarray, *,
                 shuffle: bool = False, pad_crop: bool = False, flip: bool = False, seed: int = 0):
        if batch < 1:
            raise DataError("batch size must be >= 1")
        self.data, self.batch = data, batch
        self.mean, self.std = mean, std
        self.shuffle, self.pad_crop, self.flip, self.seed = shuffle, pad_crop, flip, seed
        self._normed = normalize(data.images, mean, std)

    def __len__(self) -> int:
        return -(-len(self.data) // self.batch)

    @property
    def num_items(self) -> int:
        return len(self.data)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self._normed.shape[1:]

    def epoch(self, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng([self.seed, epoch])
        n = len(self.data)
        order = rng.permutation(n) if self.shuffle else np.arange(n)
        for start in range(0, n, self.batch):
            idx = order[start:start + self.batch]
            x = self._normed[idx]
            if self.pad_crop:
                x = pad_crop(x, rng)
            if self.flip:
                x = random_flip(x, rng)
            yield np.ascontiguousarray(x), self.data.labels[idx]

    __iter__ = epoch


def load_dataset(src: DatasetSource, batch: int = 64, seed: int = 0,
                 stats: tuple[np.ndarray, np.ndarray] | None = None) -> BatchLoader:
    """Batches for ``src``. Normalization statistics default to the training split's."""
    data = load_arrays(src)
    if stats is None:
        train = data if src.split == "train" else load_arrays(
            DatasetSource(src.kind, src.path, "train"))
        stats = channel_stats(train.images)
    train_split = src.split == "train"
    return BatchLoader(data, batch, *stats, shuffle=train_split,
                       pad_crop=src.pad_crop and train_split, flip=src.flip and train_split, seed=seed)
