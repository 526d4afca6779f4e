"""Per-layer weight-sign flip statistics and their CSV export.

Signs are compared once per optimizer step.  ``epoch_flip_rate`` is the
fraction of a layer's weights that flipped at least once during an epoch.

CSV files written by :func:`export_csv` (UTF-8, ``\\n`` line endings):

``layers.csv``
    ``layer,param_count,never_flipped_ratio`` one row per tracked layer.
``<layer>.hist.csv``
    ``bin_left,bin_right,count_all,count_never_flipped``: 64 uniform bins over
    the [min, max] range of the initial weights.
``<layer>.epochs.csv``
    ``epoch,flip_rate,never_flipped_ratio``, epochs numbered from 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binops import sign
from .tensor import ShapeError

HIST_BINS = 64
HIST_HEADER = ["bin_left", "bin_right", "count_all", "count_never_flipped"]
EPOCH_HEADER = ["epoch", "flip_rate", "never_flipped_ratio"]
INDEX_HEADER = ["layer", "param_count", "never_flipped_ratio"]


@dataclass
class FlipStats:
    init_weights_snapshot: np.ndarray
    cumulative_flips: np.ndarray = None
    flipped_this_epoch: np.ndarray = None
    epoch_flip_rate: list[float] = field(default_factory=list)
    epoch_never_flipped: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.init_weights_snapshot = np.array(self.init_weights_snapshot, dtype=np.float32)
        shape = self.init_weights_snapshot.shape
        if self.cumulative_flips is None:
            self.cumulative_flips = np.zeros(shape, np.int64)
        if self.flipped_this_epoch is None:
            self.flipped_this_epoch = np.zeros(shape, bool)

    @property
    def never_flipped(self) -> np.ndarray:
        return self.cumulative_flips == 0

    @property
    def size(self) -> int:
        return self.cumulative_flips.size


def record_step(stats: FlipStats, prev_sign: np.ndarray, cur_sign: np.ndarray) -> FlipStats:
    if prev_sign.shape != stats.cumulative_flips.shape or cur_sign.shape != prev_sign.shape:
        raise ShapeError(f"record_step: signs {prev_sign.shape}/{cur_sign.shape} vs "
                         f"tracked {stats.cumulative_flips.shape}")
    flipped = prev_sign != cur_sign
    stats.cumulative_flips += flipped
    stats.flipped_this_epoch |= flipped
    return stats


def end_epoch(stats: FlipStats) -> float:
    rate = float(np.count_nonzero(stats.flipped_this_epoch)) / stats.size
    stats.epoch_flip_rate.append(rate)
    stats.epoch_never_flipped.append(never_flipped_ratio(stats))
    stats.flipped_this_epoch[...] = False
    return rate


def never_flipped_ratio(stats: FlipStats) -> float:
    return float(np.count_nonzero(stats.never_flipped)) / stats.size


def histogram(stats: FlipStats, bins: int = HIST_BINS):
    """(edges, count_all, count_never_flipped) over the init snapshot's range."""
    w = stats.init_weights_snapshot.ravel().astype(np.float64)
    lo, hi = (float(w.min()), float(w.max())) if w.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    count_all, _ = np.histogram(w, edges)
    count_never, _ = np.histogram(w[stats.never_flipped.ravel()], edges)
    return edges, count_all, count_never


class FlipTracker:
    """Tracks a set of named weight tensors of a model across optimizer steps."""

    def __init__(self, model, layers: list[str]):
        self.model = model
        self.stats: dict[str, FlipStats] = {}
        self._prev: dict[str, np.ndarray] = {}
        for name in layers:
            w = model.parameter(name)
            self.stats[name] = FlipStats(w.copy())

    def before_step(self) -> None:
        for name in self.stats:
            self._prev[name] = sign(self.model.parameter(name))

    def after_step(self) -> None:
        for name, st in self.stats.items():
            record_step(st, self._prev.pop(name), sign(self.model.parameter(name)))

    def end_epoch(self) -> dict[str, float]:
        return {name: end_epoch(st) for name, st in self.stats.items()}

    def summary(self) -> dict[str, dict]:
        return {name: {"never_flipped_ratio": never_flipped_ratio(st),
                       "epoch_flip_rate": list(st.epoch_flip_rate)}
                for name, st in self.stats.items()}


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def export_layer_csv(stats: FlipStats, hist_path, epoch_path) -> None:
    edges, count_all, count_never = histogram(stats)
    _write(Path(hist_path), HIST_HEADER,
           ((edges[i], edges[i + 1], int(count_all[i]), int(count_never[i])) for i in range(len(count_all))))
    _write(Path(epoch_path), EPOCH_HEADER,
           ((i + 1, r, nf) for i, (r, nf) in enumerate(zip(stats.epoch_flip_rate, stats.epoch_never_flipped))))


def export_csv(stats: dict[str, FlipStats] | FlipTracker, path) -> list[Path]:
    """Write ``layers.csv`` plus a histogram and epoch file per layer under directory ``path``."""
    if isinstance(stats, FlipTracker):
        stats = stats.stats
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "layers.csv"]
    _write(written[0], INDEX_HEADER,
           ((name, st.size, never_flipped_ratio(st)) for name, st in stats.items()))
    for name, st in stats.items():
        h, e = out / f"{name}.hist.csv", out / f"{name}.epochs.csv"
        export_layer_csv(st, h, e)
        written += [h, e]
    return written
