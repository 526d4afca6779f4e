"""Training checkpoints: model tensors, optional optimizer state, JSON metadata.

Stored with :mod:`ovsw.container` under the ``OVSWCKPT`` magic.  The header
holds ``model_spec`` and a free-form ``meta`` dict (step counter, RNG state,
run config).  Tensor order: model parameters and buffers in
``BinaryNet.state_dict`` order, then ``optim.*`` entries.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import container
from .network import BinaryNet, ModelSpec, build_model
from .tensor import make_rng


def checkpoint_bytes(model: BinaryNet, optimizer=None, meta: dict | None = None) -> bytes:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    header = {"kind": "checkpoint", "model_spec": model.spec.to_dict(), "meta": meta or {}}
    return container.dumps(container.CHECKPOINT_MAGIC, tensors, header)


def save_checkpoint(path, model: BinaryNet, optimizer=None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, optimizer, meta))
    return path


def read_checkpoint(blob_or_path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = blob_or_path if isinstance(blob_or_path, (bytes, bytearray)) else Path(blob_or_path).read_bytes()
    return container.loads(bytes(blob), container.CHECKPOINT_MAGIC)


def load_model(blob_or_path) -> tuple[BinaryNet, dict, dict[str, np.ndarray]]:
    """Rebuild the model stored in a checkpoint; returns (model, header, all tensors)."""
    header, tensors = read_checkpoint(blob_or_path)
    spec = ModelSpec.from_dict(header["model_spec"])
    model = build_model(spec, make_rng(0))
    model.load_state_dict(tensors)
    return model, header, tensors
