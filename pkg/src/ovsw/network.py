"""Binarized conv blocks and small fixed architectures with a hand-written backward pass.

A block computes ``BN(alpha * (sign(a) ⊛ sign(W))) + shortcut(a)``.  The stem
convolution and the classifier head stay full precision.  Only the backward
pass needed by these architectures is implemented; there is no general autograd.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .binops import binary_conv_raw, poly_backward, sign, ste_backward

TRAIN = "train"
EVAL = "eval"

# parameter kinds, consumed by the optimizers
BINARIZED_WEIGHT = "binarized_weight"
FULL_PRECISION = "full_precision"
SCALE_ALPHA = "scale_alpha"
BN_AFFINE = "bn_affine"


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    shortcut: bool = True


@dataclass
class ModelSpec:
    name: str
    in_channels: int
    image_size: int
    num_classes: int
    stem_channels: int
    blocks: list[BlockSpec]
    stem_kernel: int = 3
    stem_stride: int = 1
    init: str = "kaiming_normal"
    gain: float = math.sqrt(2.0)
    scale_gamma: float = 1.0
    alpha_init: float = 1.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        if self.init not in ("kaiming_normal", "kaiming_uniform"):
            raise ValueError(f"unknown init {self.init!r}")
        prev = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.in_channels != prev:
                raise ValueError(f"block {i} expects {b.in_channels} input channels, previous layer gives {prev}")
            if b.shortcut and b.out_channels < b.in_channels:
                raise ValueError(f"block {i}: identity shortcut cannot shrink channels")
            prev = b.out_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def toy_conv_net(**overrides) -> ModelSpec:
    """MNIST-scale net: stride-2 stem, four binarized blocks with 16/32/64/64 outputs."""
    spec = dict(
        name="toy", in_channels=1, image_size=28, num_classes=10, stem_channels=16, stem_stride=2,
        blocks=[BlockSpec(16, 16, 1), BlockSpec(16, 32, 2), BlockSpec(32, 64, 2), BlockSpec(64, 64, 1)],
    )
    spec.update(overrides)
    return ModelSpec(**spec)


def mini_res(**overrides) -> ModelSpec:
    """CIFAR-scale net: three stages of two binarized blocks (16, 32, 64 channels)."""
    spec = dict(
        name="minires", in_channels=3, image_size=32, num_classes=10, stem_channels=16, stem_stride=1,
        blocks=[BlockSpec(16, 16, 1), BlockSpec(16, 16, 1),
                BlockSpec(16, 32, 2), BlockSpec(32, 32, 1),
                BlockSpec(32, 64, 2), BlockSpec(64, 64, 1)],
    )
    spec.update(overrides)
    return ModelSpec(**spec)


ARCHITECTURES = {"toy": toy_conv_net, "minires": mini_res}


def model_spec(name: str, **overrides) -> ModelSpec:
    try:
        return ARCHITECTURES[name](**overrides)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(ARCHITECTURES)}") from None


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


@dataclass
class BNCache:
    xhat: np.ndarray
    invstd: np.ndarray  # float64, per channel


def bn_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, running_mean: np.ndarray,
             running_var: np.ndarray, momentum: float, eps: float) -> tuple[np.ndarray, BNCache]:
    """Batch-statistics BN over (N, H, W); running stats are updated in place."""
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = ((x - T.channel_view(mu)) * T.channel_view(invstd)).astype(x.dtype)
    y = xhat * T.channel_view(gamma) + T.channel_view(beta)
    unbiased = var * n / (n - 1) if n > 1 else var
    running_mean[...] = (1 - momentum) * running_mean + momentum * mu
    running_var[...] = (1 - momentum) * running_var + momentum * unbiased
    return y, BNCache(xhat, invstd)


def bn_eval_affine(gamma, beta, running_mean, running_var, eps) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (scale, shift), float64, such that BN_eval(x) = scale*x + shift."""
    s = gamma.astype(np.float64) / np.sqrt(running_var.astype(np.float64) + eps)
    return s, beta.astype(np.float64) - running_mean.astype(np.float64) * s


def bn_eval(x, gamma, beta, running_mean, running_var, eps) -> np.ndarray:
    s, b = bn_eval_affine(gamma, beta, running_mean, running_var, eps)
    return x * T.channel_view(s.astype(x.dtype)) + T.channel_view(b.astype(x.dtype))


def bn_backward(dy: np.ndarray, cache: BNCache, gamma: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    xhat = cache.xhat
    dbeta = dy.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    # dxhat = dy*gamma, so its channel sums follow from dbeta/dgamma
    g = gamma.astype(np.float64)
    k = T.channel_view(g * cache.invstd / n)
    dx = k * (n * dy - T.channel_view(dbeta) - xhat * T.channel_view(dgamma))
    return dx.astype(dy.dtype), dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)


# ---------------------------------------------------------------------------
# shortcut resampling
# ---------------------------------------------------------------------------


def _pool_counts(h: int, w: int, dtype) -> np.ndarray:
    ch = np.full((h + 1) // 2, 2.0)
    cw = np.full((w + 1) // 2, 2.0)
    if h % 2:
        ch[-1] = 1.0
    if w % 2:
        cw[-1] = 1.0
    return np.outer(ch, cw).astype(dtype)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x2/stride-2 average pool; odd trailing rows/cols average only valid cells."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)))
    s = xp.reshape(n, c, xp.shape[2] // 2, 2, xp.shape[3] // 2, 2).sum(axis=(3, 5))
    return s / _pool_counts(h, w, x.dtype)


def avg_pool2_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    g = dy / _pool_counts(h, w, dy.dtype)
    g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
    return np.ascontiguousarray(g[:, :, :h, :w])


def shortcut_forward(a: np.ndarray, out_shape) -> np.ndarray:
    s = a
    if s.shape[2:] != tuple(out_shape[2:]):
        s = avg_pool2(s)
        if s.shape[2:] != tuple(out_shape[2:]):
            raise T.ShapeError(f"shortcut: cannot resample {a.shape} to {tuple(out_shape)}")
    extra = out_shape[1] - s.shape[1]
    if extra:
        s = np.pad(s, ((0, 0), (0, extra), (0, 0), (0, 0)))
    return s


def shortcut_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    g = dy[:, : in_shape[1]]
    if g.shape[2:] != tuple(in_shape[2:]):
        g = avg_pool2_backward(g, in_shape)
    return g


# ---------------------------------------------------------------------------
# binarized block
# ---------------------------------------------------------------------------


@dataclass
class LayerState:
    W: np.ndarray
    alpha: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    stride: int = 1
    padding: int = 1
    shortcut: bool = True

    def __post_init__(self):
        if self.bn_eps <= 0:
            raise ValueError("bn_eps must be > 0")
        if np.any(self.bn_running_var < 0):
            raise ValueError("bn_running_var must be >= 0")


@dataclass
class TapeEntry:
    a: np.ndarray
    cols: np.ndarray
    w_bin: np.ndarray
    raw: np.ndarray
    bn: BNCache
    out_shape: tuple
    consumed: bool = False


def block_forward(state: LayerState, a: np.ndarray, mode: str = TRAIN
                  ) -> tuple[np.ndarray, TapeEntry | None]:
    if a.ndim != 4 or a.shape[1] != state.W.shape[1]:
        raise T.ShapeError(f"block: input {a.shape} does not match weight {state.W.shape}")
    a_bin = sign(a)
    w_bin = sign(state.W)
    raw, cols = binary_conv_raw(a_bin, w_bin, state.stride, state.padding)
    z = raw * T.channel_view(state.alpha)
    if mode == TRAIN:
        y, cache = bn_train(z, state.bn_gamma, state.bn_beta, state.bn_running_mean,
                            state.bn_running_var, state.bn_momentum, state.bn_eps)
    elif mode == EVAL:
        y, cache = bn_eval(z, state.bn_gamma, state.bn_beta, state.bn_running_mean,
                           state.bn_running_var, state.bn_eps), None
    else:
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
    if state.shortcut:
        y = y + shortcut_forward(a, y.shape)
    tape = TapeEntry(a, cols, w_bin, raw, cache, y.shape) if mode == TRAIN else None
    return y, tape


def block_backward(state: LayerState, tape: TapeEntry | None, upstream: np.ndarray):
    """Returns (grad_W, grad_alpha, grad_bn_gamma, grad_bn_beta, grad_input)."""
    if tape is None or tape.bn is None:
        raise TapeError("block_backward needs the tape of a train-mode forward")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    if upstream.shape != tape.out_shape:
        raise T.ShapeError(f"upstream {upstream.shape} does not match block output {tape.out_shape}")
    dz, dgamma, dbeta = bn_backward(upstream, tape.bn, state.bn_gamma)
    dalpha = (dz * tape.raw).sum(axis=(0, 2, 3), dtype=np.float64).astype(dz.dtype)
    draw = dz * T.channel_view(state.alpha)
    dw_bin, da_bin = T.conv2d_backward(draw, tape.cols, tape.w_bin, tape.a.shape,
                                       state.stride, state.padding)
    grad_w = ste_backward(dw_bin)
    grad_a = poly_backward(tape.a, da_bin)
    if state.shortcut:
        grad_a = grad_a + shortcut_backward(upstream, tape.a.shape)
    tape.consumed = True
    return grad_w, dalpha, dgamma, dbeta, grad_a


# ---------------------------------------------------------------------------
# full-precision pieces
# ---------------------------------------------------------------------------


@dataclass
class StemState:
    W: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    stride: int = 1
    padding: int = 1


@dataclass
class HeadState:
    W: np.ndarray
    b: np.ndarray


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = float(-logp[np.arange(n), labels].mean())
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class BinaryNet:
    spec: ModelSpec
    stem: StemState
    blocks: list[LayerState]
    head: HeadState
    _tapes: list = field(default_factory=list, repr=False)
    _stem_cache: tuple | None = field(default=None, repr=False)
    _head_cache: tuple | None = field(default=None, repr=False)

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, np.ndarray, str]]:
        yield "stem.weight", self.stem.W, FULL_PRECISION
        yield "stem.bn.weight", self.stem.bn_gamma, BN_AFFINE
        yield "stem.bn.bias", self.stem.bn_beta, BN_AFFINE
        for i, b in enumerate(self.blocks):
            yield f"blocks.{i}.weight", b.W, BINARIZED_WEIGHT
            yield f"blocks.{i}.alpha", b.alpha, SCALE_ALPHA
            yield f"blocks.{i}.bn.weight", b.bn_gamma, BN_AFFINE
            yield f"blocks.{i}.bn.bias", b.bn_beta, BN_AFFINE
        yield "head.weight", self.head.W, FULL_PRECISION
        yield "head.bias", self.head.b, FULL_PRECISION

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "stem.bn.running_mean", self.stem.bn_running_mean
        yield "stem.bn.running_var", self.stem.bn_running_var
        for i, b in enumerate(self.blocks):
            yield f"blocks.{i}.bn.running_mean", b.bn_running_mean
            yield f"blocks.{i}.bn.running_var", b.bn_running_var

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {name: p for name, p, _ in self.named_parameters()}
        d.update(self.named_buffers())
        return d

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise KeyError(f"state dict is missing {missing}")
        for name, dst in own.items():
            src = tensors[name]
            if src.shape != dst.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {src.shape} vs model {dst.shape}")
            dst[...] = src

    def param_count(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def binarized_weight_names(self) -> list[str]:
        return [n for n, _, k in self.named_parameters() if k == BINARIZED_WEIGHT]

    def parameter(self, name: str) -> np.ndarray:
        for n, p, _ in self.named_parameters():
            if n == name:
                return p
        raise KeyError(name)

    # -- forward / backward ----------------------------------------------
    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise T.ShapeError(f"input {x.shape} does not match model with {spec.in_channels} channels")
        x = x.astype(T.DTYPE, copy=False)
        st = self.stem
        k = st.W.shape[2]
        cols = T.im2col(x, k, k, st.stride, st.padding)
        z = np.ascontiguousarray((cols @ st.W.reshape(st.W.shape[0], -1).T).transpose(0, 3, 1, 2))
        if mode == TRAIN:
            a, cache = bn_train(z, st.bn_gamma, st.bn_beta, st.bn_running_mean, st.bn_running_var,
                                st.bn_momentum, st.bn_eps)
            self._stem_cache = (cols, x.shape, cache)
        else:
            a = bn_eval(z, st.bn_gamma, st.bn_beta, st.bn_running_mean, st.bn_running_var, st.bn_eps)
        tapes = []
        for b in self.blocks:
            a, tape = block_forward(b, a, mode)
            tapes.append(tape)
        feat = a.mean(axis=(2, 3), dtype=np.float64).astype(a.dtype)
        logits = T.linear(feat, self.head.W, self.head.b)
        if mode == TRAIN:
            self._tapes = tapes
            self._head_cache = (feat, a.shape)
        return logits

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        if self._head_cache is None or not self._tapes:
            raise TapeError("backward called without a preceding train-mode forward")
        feat, a_shape = self._head_cache
        grads: dict[str, np.ndarray] = {}
        grads["head.weight"] = dlogits.T @ feat
        grads["head.bias"] = dlogits.sum(axis=0, dtype=np.float64).astype(dlogits.dtype)
        dfeat = dlogits @ self.head.W
        da = np.broadcast_to((dfeat / (a_shape[2] * a_shape[3]))[:, :, None, None], a_shape)
        da = np.ascontiguousarray(da)
        for i in reversed(range(len(self.blocks))):
            gw, galpha, ggamma, gbeta, da = block_backward(self.blocks[i], self._tapes[i], da)
            grads[f"blocks.{i}.weight"] = gw
            grads[f"blocks.{i}.alpha"] = galpha
            grads[f"blocks.{i}.bn.weight"] = ggamma
            grads[f"blocks.{i}.bn.bias"] = gbeta
        cols, x_shape, cache = self._stem_cache
        st = self.stem
        dz, ggamma, gbeta = bn_backward(da, cache, st.bn_gamma)
        d2 = dz.transpose(0, 2, 3, 1).reshape(-1, st.W.shape[0])
        grads["stem.weight"] = (d2.T @ cols.reshape(-1, cols.shape[-1])).reshape(st.W.shape)
        grads["stem.bn.weight"] = ggamma
        grads["stem.bn.bias"] = gbeta
        self._tapes, self._stem_cache, self._head_cache = [], None, None
        return {name: grads[name] for name, _, _ in self.named_parameters()}

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray):
        logits = self.forward(x, TRAIN)
        loss, dlogits = cross_entropy(logits, labels)
        return loss, logits, self.backward(dlogits)

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Eval-mode logits, computed in fixed-size chunks."""
        out = [self.forward(x[i : i + batch_size], EVAL) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes), T.DTYPE)


def forward_loss(model: BinaryNet, batch: np.ndarray, labels: np.ndarray, mode: str = TRAIN
                 ) -> tuple[float, np.ndarray]:
    logits = model.forward(batch, mode)
    loss, _ = cross_entropy(logits, labels)
    return loss, logits


def _init_weight(spec: ModelSpec, shape, scale_gamma: float, rng) -> np.ndarray:
    init = T.kaiming_normal_init if spec.init == "kaiming_normal" else T.kaiming_uniform_init
    return init(shape, spec.gain, scale_gamma, rng)


def _bn_params(c: int):
    return (np.ones(c, T.DTYPE), np.zeros(c, T.DTYPE), np.zeros(c, T.DTYPE), np.ones(c, T.DTYPE))


def build_model(spec: ModelSpec, rng: np.random.Generator) -> BinaryNet:
    """Initialize a model; draws stem, then blocks in order, then head from ``rng``.

    ``spec.scale_gamma`` multiplies the spread of the binarized block weights only.
    """
    k = spec.stem_kernel
    stem_w = _init_weight(spec, (spec.stem_channels, spec.in_channels, k, k), 1.0, rng)
    g, b, m, v = _bn_params(spec.stem_channels)
    stem = StemState(stem_w, g, b, m, v, spec.bn_momentum, spec.bn_eps, spec.stem_stride, k // 2)
    blocks = []
    for bs in spec.blocks:
        w = _init_weight(spec, (bs.out_channels, bs.in_channels, bs.kernel, bs.kernel), spec.scale_gamma, rng)
        g, b, m, v = _bn_params(bs.out_channels)
        alpha = np.full(bs.out_channels, spec.alpha_init, T.DTYPE)
        blocks.append(LayerState(w, alpha, g, b, m, v, spec.bn_momentum, spec.bn_eps,
                                 bs.stride, bs.kernel // 2, bs.shortcut))
    c_last = spec.blocks[-1].out_channels if spec.blocks else spec.stem_channels
    # gain 1/sqrt(3) makes the uniform bound 1/sqrt(fan_in), the usual linear-layer default
    head_w = T.kaiming_uniform_init((spec.num_classes, c_last), 1 / math.sqrt(3), 1.0, rng)
    head = HeadState(head_w, np.zeros(spec.num_classes, T.DTYPE))
    return BinaryNet(spec, stem, blocks, head)
