"""Scale-invariance check, init-scale ablation and optimizer comparison."""
from __future__ import annotations

import copy
import csv
import json
from pathlib import Path

import numpy as np

from ..network import TRAIN, build_model, cross_entropy, model_spec
from ..tensor import make_rng
from .config import TrainConfig
from .data import Dataset
from .train import RunMetrics, train

INVARIANCE_GAMMAS = (0.01, 1.0, 100.0)
INVARIANCE_THRESHOLD = 1e-5
COMPARE_ALGORITHMS = ("vanilla", "lars", "ovsw")


def _rel_dev(x: np.ndarray, ref: np.ndarray) -> float:
    x, ref = np.asarray(x, np.float64), np.asarray(ref, np.float64)
    denom = np.abs(ref).max()
    return float(np.abs(x - ref).max() / denom) if denom > 0 else float(np.abs(x).max())


def _forward_backward(model, x, y):
    logits = model.forward(x, TRAIN)
    _, dlogits = cross_entropy(logits, y)
    grads = model.backward(dlogits)
    return logits, [grads[n] for n in model.binarized_weight_names()]


def check_invariance(model: str = "minires", gammas=INVARIANCE_GAMMAS, batch_size: int = 8, seed: int = 0,
                     threshold: float = INVARIANCE_THRESHOLD) -> dict:
    """Scale every binarized weight tensor by each gamma and compare one train-mode pass.

    Rows compare logits and dL/dW against the unscaled model.  The control rows
    also scale alpha, which moves the BN input and should break the invariance.
    """
    rng = make_rng(seed)
    base = build_model(model_spec(model), rng)
    spec = base.spec
    x = rng.standard_normal((batch_size, spec.in_channels, spec.image_size, spec.image_size)).astype(np.float32)
    y = rng.integers(0, spec.num_classes, size=batch_size)
    ref_logits, ref_grads = _forward_backward(copy.deepcopy(base), x, y)

    def run(gamma: float, scale_alpha: bool) -> dict:
        m = copy.deepcopy(base)
        g = np.float32(gamma)
        for blk in m.blocks:
            blk.W *= g
            if scale_alpha:
                blk.alpha *= g
        logits, grads = _forward_backward(m, x, y)
        return {"gamma": float(gamma), "logits_dev": _rel_dev(logits, ref_logits),
                "grad_dev": max(_rel_dev(a, b) for a, b in zip(grads, ref_grads))}

    rows = []
    for gamma in gammas:
        r = run(gamma, False)
        r["pass"] = max(r["logits_dev"], r["grad_dev"]) <= threshold
        rows.append(r)
    control = [run(gamma, True) for gamma in gammas if gamma != 1.0]
    control_dev = max((max(r["logits_dev"], r["grad_dev"]) for r in control), default=0.0)
    return {"model": model, "threshold": threshold, "batch_size": batch_size, "seed": seed,
            "max_logits_dev": max(r["logits_dev"] for r in rows),
            "max_grad_dev": max(r["grad_dev"] for r in rows),
            "rows": rows, "control": control, "control_max_dev": control_dev,
            "control_exceeds": control_dev > threshold,
            "pass": all(r["pass"] for r in rows) and control_dev > threshold}


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def gamma_tag(gamma: float) -> str:
    return f"gamma_{gamma:g}"


def gamma_ablation(config: TrainConfig, gammas, datasets: tuple[Dataset, Dataset] | None = None
                   ) -> dict[float, RunMetrics]:
    """One vanilla-SGD run per init scale; writes ``<out>/gamma_<g>/`` runs plus ``ablation.csv``.

    ``ablation.csv`` has one row per (gamma, layer, epoch) with that epoch's flip rate.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[float, RunMetrics] = {}
    rows = []
    for g in gammas:
        cfg = config.replace(scale_gamma=float(g), optimizer={"name": "vanilla"},
                             output_dir=str(out / gamma_tag(g)))
        res = train(cfg, datasets)
        results[float(g)] = res
        for layer, fs in res.flips.items():
            for e, rate in enumerate(fs["epoch_flip_rate"], 1):
                rows.append((float(g), layer, e, rate, res.rows[e - 1]["test_acc"]))
    _write_csv(out / "ablation.csv", ["gamma", "layer", "epoch", "flip_rate", "test_acc"], rows)
    return results


COMPARE_HEADER = ["optimizer", "layer", "final_test_acc", "steps", "never_flipped_ratio", "mean_epoch_flip_rate"]


def compare_optimizers(config: TrainConfig, datasets: tuple[Dataset, Dataset] | None = None,
                       algorithms=COMPARE_ALGORITHMS) -> list[dict]:
    """Train each optimizer with the same seed and budget; writes ``summary.csv`` and ``summary.json``."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in algorithms:
        res = train(config.replace(optimizer={"name": name}, output_dir=str(out / name)), datasets)
        for layer, fs in res.flips.items():
            rates = fs["epoch_flip_rate"]
            rows.append({"optimizer": name, "layer": layer, "final_test_acc": res.final["test_acc"],
                         "steps": res.steps, "never_flipped_ratio": fs["never_flipped_ratio"],
                         "mean_epoch_flip_rate": float(np.mean(rates))})
    _write_csv(out / "summary.csv", COMPARE_HEADER, ([r[k] for k in COMPARE_HEADER] for r in rows))
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows
