from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest


DEFAULT_DATA = Path("/root/data")
if "OVSW_DATA" not in os.environ and DEFAULT_DATA.exists():
    os.environ["OVSW_DATA"] = str(DEFAULT_DATA)

# acceptance results, filled by test_acceptance.py and printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    return struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.astype(np.uint8).tobytes()


def write_fake_mnist(root: Path, n_train: int = 64, n_test: int = 32, seed: int = 0, gz: bool = True) -> Path:
    """Class-dependent blobs so a tiny model can learn something."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        imgs = rng.integers(0, 40, (n, 28, 28)).astype(np.uint8)
        for i, c in enumerate(labels):
            r, col = divmod(int(c), 5)
            imgs[i, 4 + 10 * r : 12 + 10 * r, 2 + 5 * col : 6 + 5 * col] = 255
        for kind, arr, magic in (("images-idx3", imgs, 2051), ("labels-idx1", labels, 2049)):
            name = f"{prefix}-{kind}-ubyte"
            data = idx_bytes(arr, magic)
            if gz:
                (root / (name + ".gz")).write_bytes(gzip.compress(data, mtime=0))
            else:
                (root / name).write_bytes(data)
    return root


def cifar_bytes(n: int, seed: int) -> bytes:
    rng = np.random.default_rng(seed)
    rec = rng.integers(0, 256, (n, 3073)).astype(np.uint8)
    rec[:, 0] = rng.integers(0, 10, n)
    return rec.tobytes()


def write_fake_cifar(root: Path, per_file: int = 4) -> Path:
    d = root / "cifar-10-batches-bin"
    d.mkdir(parents=True, exist_ok=True)
    for i in range(1, 6):
        (d / f"data_batch_{i}.bin").write_bytes(cifar_bytes(per_file, i))
    (d / "test_batch.bin").write_bytes(cifar_bytes(per_file, 0))
    return root


@pytest.fixture
def fake_mnist(tmp_path) -> Path:
    return write_fake_mnist(tmp_path / "mnist")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
