"""OvSW (adaptive gradient scaling + silence-aware decay) and the SGD / LARS baselines.

All three optimizers share per-parameter slots holding a momentum buffer and,
for binarized conv weights, the flip-state EMA ``S`` (kept in float64) together
with the sign snapshot it is measured against.  Updates are in place on the model arrays.

Momentum follows the usual SGD convention: the freshly updated buffer drives
the weight step.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .binops import sign
from .network import BINARIZED_WEIGHT, BN_AFFINE, FULL_PRECISION, SCALE_ALPHA
from .tensor import NonFiniteError, ShapeError, filter_norms

ALGORITHMS = ("ovsw", "vanilla", "lars")


@dataclass
class OvswConfig:
    base_lr: float = 0.1
    total_steps: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ags_lambda: float = 0.04
    sad_sigma: float = 9e-4
    ema_momentum: float = 0.99
    sad_penalty: float = 1e-4
    ags_enabled: bool = True
    sad_enabled: bool = True
    lars_eta: float = 0.01

    def __post_init__(self):
        if not 0 <= self.ema_momentum < 1:
            raise ValueError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        for name in ("ags_lambda", "sad_sigma", "sad_penalty", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OvswConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer fields {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "cifar": dict(ags_lambda=0.04, sad_sigma=9e-4, weight_decay=5e-4),
    "imagenet": dict(ags_lambda=0.02, sad_sigma=2e-5, weight_decay=1e-4),
}


def preset(name: str, **overrides) -> OvswConfig:
    return OvswConfig(**{**PRESETS[name], **overrides})


@dataclass
class ParamSlot:
    name: str
    param: np.ndarray
    kind: str
    V: np.ndarray = None
    S: np.ndarray | None = None
    prev_sign: np.ndarray | None = None

    def __post_init__(self):
        if self.V is None:
            self.V = np.zeros_like(self.param)
        if self.kind == BINARIZED_WEIGHT:
            if self.S is None:
                self.S = np.zeros(self.param.shape, np.float64)
            if self.prev_sign is None:
                self.prev_sign = sign(self.param)


def make_slots(model) -> list[ParamSlot]:
    return [ParamSlot(name, p, kind) for name, p, kind in model.named_parameters()]


def cosine_lr(t: int, config: OvswConfig) -> float:
    T = config.total_steps
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / T))


def ags_scale(G: np.ndarray, W: np.ndarray, lam: float) -> np.ndarray:
    """Raise every filter's ||G_k||/||W_k|| to at least ``lam`` by rescaling G_k.

    Filters with a zero gradient stay zero; filters with zero weight norm are
    left unchanged.  Other filters are returned bit-identical.
    """
    if G.shape != W.shape:
        raise ShapeError(f"ags_scale: gradient {G.shape} vs weight {W.shape}")
    gn = filter_norms(G)
    wn = filter_norms(W)
    active = (gn > 0) & (wn > 0)
    ratio = np.where(active, gn / np.where(wn > 0, wn, 1.0), np.inf)
    lift = active & (ratio < lam)
    if not lift.any():
        return G.copy()
    out = G.copy()
    factor = lam * wn[lift] / gn[lift]
    shape = (-1,) + (1,) * (G.ndim - 1)
    out[lift] = (G[lift] * factor.reshape(shape)).astype(G.dtype)
    return out


def update_flip_state(S: np.ndarray, prev_sign: np.ndarray, cur_sign: np.ndarray, m: float) -> np.ndarray:
    """EMA of the flip indicator |cur - prev| / 2 (exactly 0 or 1)."""
    flipped = (prev_sign != cur_sign).astype(np.float64)
    return m * np.asarray(S, np.float64) + (1 - m) * flipped


def sad_decay(G: np.ndarray, W: np.ndarray, S: np.ndarray, sigma: float, penalty: float) -> np.ndarray:
    """Add ``penalty * W`` to the gradient of weights whose flip state is below ``sigma``."""
    if not (G.shape == W.shape == S.shape):
        raise ShapeError(f"sad_decay: shapes {G.shape}, {W.shape}, {S.shape} differ")
    silent = S < sigma
    if not silent.any():
        return G.copy()
    return np.where(silent, G + G.dtype.type(penalty) * W, G)


def _check(slots: list[ParamSlot], grads: dict[str, np.ndarray]) -> None:
    for s in slots:
        g = grads.get(s.name)
        if g is None:
            raise KeyError(f"no gradient for parameter {s.name!r}")
        if g.shape != s.param.shape:
            raise ShapeError(f"{s.name}: gradient {g.shape} vs parameter {s.param.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {s.name}")


def _momentum_step(slot: ParamSlot, g: np.ndarray, lr: float, cfg: OvswConfig, decay: bool,
                   local_lr: float = 1.0) -> None:
    p = slot.param
    f = p.dtype.type
    d = g + f(cfg.weight_decay) * p if decay else g
    slot.V[...] = f(cfg.momentum) * slot.V + d
    p -= f(lr * local_lr) * slot.V


def _refresh_flip_state(slot: ParamSlot, cfg: OvswConfig) -> None:
    cur = sign(slot.param)
    slot.S[...] = update_flip_state(slot.S, slot.prev_sign, cur, cfg.ema_momentum)
    slot.prev_sign[...] = cur


def _plain(slot: ParamSlot, g: np.ndarray, lr: float, cfg: OvswConfig) -> None:
    _momentum_step(slot, g, lr, cfg, decay=slot.kind != SCALE_ALPHA)


def ovsw_step(slots: list[ParamSlot], grads: dict[str, np.ndarray], t: int, config: OvswConfig
              ) -> list[ParamSlot]:
    _check(slots, grads)
    lr = cosine_lr(t, config)
    for s in slots:
        g = grads[s.name]
        if s.kind == BINARIZED_WEIGHT:
            if config.ags_enabled:
                g = ags_scale(g, s.param, config.ags_lambda)
            if config.sad_enabled:
                g = sad_decay(g, s.param, s.S, config.sad_sigma, config.sad_penalty)
            _momentum_step(s, g, lr, config, decay=True)
            _refresh_flip_state(s, config)
        else:
            _plain(s, g, lr, config)
    return slots


def vanilla_step(slots: list[ParamSlot], grads: dict[str, np.ndarray], t: int, config: OvswConfig
                 ) -> list[ParamSlot]:
    _check(slots, grads)
    lr = cosine_lr(t, config)
    for s in slots:
        _plain(s, grads[s.name], lr, config)
        if s.kind == BINARIZED_WEIGHT:
            _refresh_flip_state(s, config)
    return slots


def lars_local_lr(G: np.ndarray, W: np.ndarray, eta: float, weight_decay: float) -> float | None:
    """eta*||W|| / (||G|| + wd*||W||), or None when the denominator vanishes."""
    wn = float(np.sqrt(np.sum(W.astype(np.float64) ** 2)))
    gn = float(np.sqrt(np.sum(G.astype(np.float64) ** 2)))
    denom = gn + weight_decay * wn
    if denom == 0:
        return None
    return eta * wn / denom


def lars_step(slots: list[ParamSlot], grads: dict[str, np.ndarray], t: int, config: OvswConfig
              ) -> list[ParamSlot]:
    """Layer-wise local LR on binarized weights; the raw gradient enters the momentum."""
    _check(slots, grads)
    lr = cosine_lr(t, config)
    for s in slots:
        g = grads[s.name]
        if s.kind == BINARIZED_WEIGHT:
            local = lars_local_lr(g, s.param, config.lars_eta, config.weight_decay)
            if local is None:
                continue
            _momentum_step(s, g, lr, config, decay=True, local_lr=local)
            _refresh_flip_state(s, config)
        else:
            _plain(s, g, lr, config)
    return slots


STEP_FUNCTIONS = {"ovsw": ovsw_step, "vanilla": vanilla_step, "lars": lars_step}


@dataclass
class Optimizer:
    """Slots plus a step counter; ``step`` applies the chosen algorithm at the current LR."""
    slots: list[ParamSlot]
    config: OvswConfig
    algorithm: str = "ovsw"
    t: int = 0
    _by_name: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown optimizer {self.algorithm!r}; choose from {ALGORITHMS}")
        self._by_name = {s.name: s for s in self.slots}

    @classmethod
    def for_model(cls, model, config: OvswConfig, algorithm: str = "ovsw") -> "Optimizer":
        return cls(make_slots(model), config, algorithm)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        lr = cosine_lr(self.t, self.config)
        STEP_FUNCTIONS[self.algorithm](self.slots, grads, self.t, self.config)
        self.t += 1
        return lr

    def slot(self, name: str) -> ParamSlot:
        return self._by_name[name]

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for s in self.slots:
            out[f"optim.{s.name}.V"] = s.V
            if s.S is not None:
                out[f"optim.{s.name}.S"] = s.S
                out[f"optim.{s.name}.prev_sign"] = s.prev_sign
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, arr in self.state_tensors().items():
            if name not in tensors:
                raise KeyError(f"optimizer state is missing {name}")
            arr[...] = tensors[name]


__all__ = [
    "OvswConfig", "ParamSlot", "Optimizer", "PRESETS", "preset", "make_slots", "cosine_lr", "ags_scale",
    "update_flip_state", "sad_decay", "ovsw_step", "vanilla_step", "lars_step", "lars_local_lr",
    "BINARIZED_WEIGHT", "BN_AFFINE", "FULL_PRECISION", "SCALE_ALPHA",
]
