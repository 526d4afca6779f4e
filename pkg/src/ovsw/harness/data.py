"""MNIST (IDX) and CIFAR-10 (binary batches) loaders, subsetting, batching, augmentation.

Images come back as float32 NCHW, normalized per channel with fixed constants:

    MNIST     mean 0.1307, std 0.3081
    CIFAR-10  mean (0.4914, 0.4822, 0.4465), std (0.2470, 0.2435, 0.2616)

Expected files (``.gz`` optional for MNIST)::

    <root>/train-images-idx3-ubyte  <root>/train-labels-idx1-ubyte
    <root>/t10k-images-idx3-ubyte   <root>/t10k-labels-idx1-ubyte

    <root>/data_batch_{1..5}.bin    <root>/test_batch.bin
    (or the same inside <root>/cifar-10-batches-bin/)
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN, CIFAR_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10000

DATA_ENV = "OVSW_DATA"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # float32 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name)

    def subset(self, fraction: float, rng: np.random.Generator) -> "Dataset":
        """Seeded random subset of ``ceil(fraction * N)`` samples, kept in original order."""
        if not 0 < fraction <= 1:
            raise ValueError(f"subset fraction must lie in (0, 1], got {fraction}")
        if fraction == 1:
            return self
        k = max(1, int(np.ceil(fraction * len(self))))
        return self.take(np.sort(rng.choice(len(self), size=k, replace=False)))


def data_root(explicit: str | os.PathLike | None, dataset: str) -> Path:
    """``explicit`` if given, else ``$OVSW_DATA/<dataset>``."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_ENV)
    if not env:
        raise FileNotFoundError(f"no data path given and ${DATA_ENV} is not set")
    return Path(env) / dataset


def _normalize(raw: np.ndarray, mean, std) -> np.ndarray:
    x = raw.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (x - m) / s


# ---------------------------------------------------------------------------
# MNIST
# ---------------------------------------------------------------------------


def _open_idx(root: Path, stem: str) -> bytes:
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.exists():
            data = p.read_bytes()
            return gzip.decompress(data) if name.endswith(".gz") else data
    raise FileNotFoundError(f"MNIST file {stem}[.gz] not found in {root}")


def parse_idx(blob: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(blob) < 8:
        raise DataFormatError(f"{what}: truncated IDX header ({len(blob)} bytes); "
                              "the file is incomplete, compare its checksum with the published one")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{what}: bad IDX magic number, expected {expected_magic} got {magic}")
    ndim = magic & 0xFF
    dims = struct.unpack_from(">" + "I" * ndim, blob, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(blob) - start < need:
        raise DataFormatError(f"{what}: truncated payload, header declares {need} bytes but "
                              f"{len(blob) - start} present; verify the file checksum")
    return np.frombuffer(blob, np.uint8, count=need, offset=start).reshape(dims)


def _load_mnist_split(root: Path, prefix: str) -> Dataset:
    imgs = parse_idx(_open_idx(root, f"{prefix}-images-idx3-ubyte"), IDX_IMAGES_MAGIC, f"{prefix} images")
    labs = parse_idx(_open_idx(root, f"{prefix}-labels-idx1-ubyte"), IDX_LABELS_MAGIC, f"{prefix} labels")
    if len(imgs) != len(labs):
        raise DataFormatError(f"{prefix}: {len(imgs)} images vs {len(labs)} labels")
    return Dataset(_normalize(imgs[:, None], MNIST_MEAN, MNIST_STD), labs.astype(np.int64), f"mnist-{prefix}")


def load_mnist(path) -> tuple[Dataset, Dataset]:
    root = Path(path)
    return _load_mnist_split(root, "train"), _load_mnist_split(root, "t10k")


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


def parse_cifar_batch(blob: bytes, what: str) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) % CIFAR_RECORD:
        raise DataFormatError(f"{what}: size {len(blob)} is not a multiple of the {CIFAR_RECORD}-byte "
                              "record; the file is truncated or corrupt, verify its checksum")
    rec = np.frombuffer(blob, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{what}: label byte {labels.max()} outside 0..9; not a CIFAR-10 binary batch")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _cifar_dir(root: Path) -> Path:
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / "test_batch.bin").exists():
            return cand
    raise FileNotFoundError(f"CIFAR-10 binary batches (test_batch.bin) not found under {root}")


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    root = _cifar_dir(Path(path))
    parts = [parse_cifar_batch((root / f"data_batch_{i}.bin").read_bytes(), f"data_batch_{i}.bin")
             for i in range(1, 6)]
    test_x, test_y = parse_cifar_batch((root / "test_batch.bin").read_bytes(), "test_batch.bin")
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    return (Dataset(_normalize(train_x, CIFAR_MEAN, CIFAR_STD), train_y, "cifar10-train"),
            Dataset(_normalize(test_x, CIFAR_MEAN, CIFAR_STD), test_y, "cifar10-test"))


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


def load_dataset(name: str, path=None) -> tuple[Dataset, Dataset]:
    if name not in LOADERS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(LOADERS)}")
    return LOADERS[name](data_root(path, name))


# ---------------------------------------------------------------------------
# batching / augmentation
# ---------------------------------------------------------------------------


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the last batch may be short."""
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def augment_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = xp[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
