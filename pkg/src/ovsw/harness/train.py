"""Training loop, evaluation and run artifacts.

A run directory holds::

    metrics.csv        epoch,train_loss,train_acc,test_acc,lr,wall_seconds
    flips/             per-layer flip CSVs (see ovsw.fliptrack)
    checkpoints/       epoch_XXXX.ckpt every ``checkpoint_every`` epochs, final.ckpt
    run.json           resolved config and final metrics (no wall-clock fields)

Everything except the ``wall_seconds`` column is a pure function of the config.
Random streams are split from the seed as (init, data order + augmentation,
subset selection).  ``lr`` in a metrics row is the rate used by the last step
of that epoch.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint as ckpt
from ..fliptrack import FlipTracker, export_csv
from ..network import BinaryNet, build_model, model_spec
from ..optim import Optimizer
from ..tensor import spawn_rngs
from .config import TrainConfig
from .data import Dataset, augment_crop_flip, iterate_batches, load_dataset

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "lr", "wall_seconds"]
WALL_CLOCK_COLUMNS = ("wall_seconds",)
# run-location fields are left out of checkpoints so identical runs in different directories match
_LOCATION_KEYS = ("output_dir", "data_path")


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    flips: dict = field(default_factory=dict)
    output_dir: Path | None = None
    checkpoint: Path | None = None
    steps: int = 0

    @property
    def final(self) -> dict:
        return self.rows[-1]


def prepare_data(config: TrainConfig, datasets: tuple[Dataset, Dataset] | None = None
                 ) -> tuple[Dataset, Dataset]:
    """Load (or take) the train/test sets and apply the seeded subsets."""
    train, test = datasets if datasets is not None else load_dataset(config.dataset, config.data_path)
    subset_rng = spawn_rngs(config.seed, 3)[2]
    return train.subset(config.subset, subset_rng), test.subset(config.test_subset, subset_rng)


def build_from_config(config: TrainConfig) -> BinaryNet:
    spec = model_spec(config.model, init=config.init, scale_gamma=config.scale_gamma)
    return build_model(spec, spawn_rngs(config.seed, 3)[0])


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.count_nonzero(logits.argmax(axis=1) == labels)) / len(labels)


def evaluate_model(model: BinaryNet, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return accuracy(model.predict(dataset.images), dataset.labels)


def evaluate(checkpoint, dataset: Dataset) -> float:
    """Eval-mode accuracy of a stored model on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model, _, _ = ckpt.load_model(checkpoint)
    return evaluate_model(model, dataset)


def checkpoint_meta(config: TrainConfig, epoch: int, opt: Optimizer, data_rng, test_acc: float) -> dict:
    cfg = {k: v for k, v in config.to_dict().items() if k not in _LOCATION_KEYS}
    return {"epoch": epoch, "step": opt.t, "algorithm": opt.algorithm,
            "optimizer_config": opt.config.to_dict(), "data_rng_state": data_rng.bit_generator.state,
            "test_acc": test_acc, "config": cfg}


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRICS_HEADER])


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def _train_epoch(model, opt, tracker, train: Dataset, config: TrainConfig, rng) -> tuple[float, float, float]:
    loss_sum, correct, lr = 0.0, 0, 0.0
    for idx in iterate_batches(len(train), config.batch_size, rng):
        x = train.images[idx]
        if config.use_augment:
            x = augment_crop_flip(x, rng)
        y = train.labels[idx]
        loss, logits, grads = model.loss_and_grads(x, y)
        tracker.before_step()
        lr = opt.step(grads)
        tracker.after_step()
        loss_sum += loss * len(idx)
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y))
    return loss_sum / len(train), correct / len(train), lr


def train(config: TrainConfig, datasets: tuple[Dataset, Dataset] | None = None,
          resume_from=None) -> RunMetrics:
    """Run the configured training; ``datasets`` bypasses loading from disk.

    ``resume_from`` continues from a checkpoint written by an earlier run of the
    same config; metrics rows and flip statistics then cover only the resumed epochs.
    """
    train_set, test_set = prepare_data(config, datasets)
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("training and test sets must be non-empty")
    out = Path(config.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    model = build_from_config(config)
    steps_per_epoch = -(-len(train_set) // config.batch_size)
    opt = Optimizer.for_model(model, config.ovsw_config(config.epochs * steps_per_epoch), config.algorithm)
    data_rng = spawn_rngs(config.seed, 3)[1]
    start_epoch = 0
    if resume_from is not None:
        _, header, tensors = ckpt.load_model(resume_from)
        model.load_state_dict(tensors)
        opt.load_state_tensors(tensors)
        meta = header["meta"]
        opt.t = meta["step"]
        start_epoch = meta["epoch"]
        data_rng.bit_generator.state = meta["data_rng_state"]

    layers = config.track_layers or model.binarized_weight_names()
    tracker = FlipTracker(model, layers)
    result = RunMetrics(output_dir=out)
    t0 = time.perf_counter()
    for epoch in range(start_epoch + 1, config.epochs + 1):
        loss, acc, lr = _train_epoch(model, opt, tracker, train_set, config, data_rng)
        tracker.end_epoch()
        test_acc = evaluate_model(model, test_set)
        row = {"epoch": epoch, "train_loss": loss, "train_acc": acc, "test_acc": test_acc, "lr": lr,
               "wall_seconds": time.perf_counter() - t0}
        result.rows.append(row)
        write_metrics_csv(out / "metrics.csv", result.rows)
        log.info("epoch %d/%d loss %.4f train_acc %.4f test_acc %.4f lr %.5f", epoch, config.epochs,
                 loss, acc, test_acc, lr)
        meta = checkpoint_meta(config, epoch, opt, data_rng, test_acc)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            ckpt.save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}.ckpt", model, opt, meta)
    if not result.rows:
        raise ValueError(f"nothing to do: checkpoint already at epoch {start_epoch} of {config.epochs}")

    result.checkpoint = ckpt.save_checkpoint(out / "checkpoints" / "final.ckpt", model, opt, meta)
    export_csv(tracker, out / "flips")
    result.flips = tracker.summary()
    result.steps = opt.t
    final = {k: v for k, v in result.final.items() if k not in WALL_CLOCK_COLUMNS}
    run = {"config": config.to_dict(), "final": final, "steps": opt.t, "flips": result.flips}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result
