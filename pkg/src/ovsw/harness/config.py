"""Run configuration: JSON schema, defaults and ``key=value`` overrides.

A config file is one JSON object.  Every key is optional; missing keys take
the defaults below.  ``optimizer`` is a nested object holding the algorithm
name plus any optimizer hyperparameter (``total_steps`` is derived from
epochs and dataset size and cannot be set)::

    {
      "dataset": "mnist",            # mnist | cifar10
      "data_path": null,             # null -> $OVSW_DATA/<dataset>
      "subset": 1.0,                 # fraction of the training set, (0, 1]
      "test_subset": 1.0,            # fraction of the test set, (0, 1]
      "model": "toy",                # toy | minires
      "init": "kaiming_normal",      # kaiming_normal | kaiming_uniform
      "scale_gamma": 1.0,            # init spread multiplier for binarized weights
      "epochs": 20,
      "batch_size": 128,
      "seed": 0,
      "output_dir": "runs/default",
      "track_layers": null,          # null -> every binarized weight
      "checkpoint_every": 0,         # 0 -> only the final checkpoint
      "augment": null,               # null -> on for cifar10, off for mnist
      "optimizer": {
        "name": "ovsw",              # ovsw | vanilla | lars
        "base_lr": 0.1, "momentum": 0.9, "weight_decay": 0.0005,
        "ags_lambda": 0.04, "sad_sigma": 0.0009, "ema_momentum": 0.99,
        "sad_penalty": 0.0001, "ags_enabled": true, "sad_enabled": true,
        "lars_eta": 0.01
      }
    }

Overrides use dotted keys, e.g. ``optimizer.ags_lambda=0.04``; the value is
parsed as JSON when possible and kept as a string otherwise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..network import ARCHITECTURES
from ..optim import ALGORITHMS, OvswConfig

DATASETS = ("mnist", "cifar10")
INITS = ("kaiming_normal", "kaiming_uniform")

_OPTIM_FIELDS = [f.name for f in fields(OvswConfig) if f.name != "total_steps"]


def default_optimizer() -> dict:
    d = OvswConfig().to_dict()
    d.pop("total_steps")
    return {"name": "ovsw", **d}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    data_path: str | None = None
    subset: float = 1.0
    test_subset: float = 1.0
    model: str = "toy"
    init: str = "kaiming_normal"
    scale_gamma: float = 1.0
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    output_dir: str = "runs/default"
    track_layers: list[str] | None = None
    checkpoint_every: int = 0
    augment: bool | None = None
    optimizer: dict = field(default_factory=default_optimizer)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.model not in ARCHITECTURES:
            raise ConfigError(f"model must be one of {sorted(ARCHITECTURES)}, got {self.model!r}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        for name in ("subset", "test_subset"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.scale_gamma <= 0:
            raise ConfigError(f"scale_gamma must be > 0, got {self.scale_gamma}")
        opt = {**default_optimizer(), **(self.optimizer or {})}
        unknown = set(opt) - set(_OPTIM_FIELDS) - {"name"}
        if unknown:
            raise ConfigError(f"unknown optimizer keys {sorted(unknown)}")
        if opt["name"] not in ALGORITHMS:
            raise ConfigError(f"optimizer.name must be one of {ALGORITHMS}, got {opt['name']!r}")
        self.optimizer = opt
        try:
            self.ovsw_config(1)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def algorithm(self) -> str:
        return self.optimizer["name"]

    @property
    def use_augment(self) -> bool:
        return self.dataset == "cifar10" if self.augment is None else bool(self.augment)

    def ovsw_config(self, total_steps: int) -> OvswConfig:
        params = {k: v for k, v in self.optimizer.items() if k != "name"}
        return OvswConfig(total_steps=total_steps, **params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        opt = changes.pop("optimizer", None)
        d.update(changes)
        if opt:
            d["optimizer"] = {**d["optimizer"], **opt}
        return TrainConfig.from_dict(d)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings to a config dict (nested keys with dots)."""
    d = json.loads(json.dumps(d))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(value)
    return d


def load_config(path=None, overrides: list[str] | None = None, base: dict | None = None) -> TrainConfig:
    d = dict(base or {})
    if path is not None:
        with open(Path(path), encoding="utf-8") as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        d.update(loaded)
    return TrainConfig.from_dict(apply_overrides(d, overrides or []))
