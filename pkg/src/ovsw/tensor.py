"""Dense float32 tensors, reductions, convolution primitives and seeded initializers.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order with dtype
float32.  Reductions accumulate in float64 and cast back.  Broadcasting beyond
numpy's usual rules is limited to per-channel vectors applied against axis 1 of
an NCHW tensor (see :func:`channel_view`).

Random streams come from numpy's ``PCG64`` bit generator seeded with a 64-bit
integer.  The stream identity and the order in which initializers draw from it
are part of the checkpoint reproducibility contract.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

DTYPE = np.float32
RNG_ALGORITHM = "numpy.PCG64"


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` (PCG64, identical on every platform)."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one seed via SeedSequence."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def fan_in(shape: Sequence[int]) -> int:
    if len(shape) < 2:
        raise ShapeError(f"initializer needs at least 2 dims, got shape {tuple(shape)}")
    n = math.prod(shape[1:])
    if n == 0:
        raise ShapeError(f"zero fan_in for shape {tuple(shape)}")
    return n


def _check_init_args(gain: float, scale_gamma: float) -> None:
    if gain <= 0:
        raise ValueError(f"gain must be > 0, got {gain}")
    if scale_gamma <= 0:
        raise ValueError(f"scale_gamma must be > 0, got {scale_gamma}")


def kaiming_normal_init(shape: Sequence[int], gain: float, scale_gamma: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Samples from N(0, (scale_gamma * gain / sqrt(fan_in))^2).

    The unit-scale sample is rounded to float32 first and then multiplied by
    ``scale_gamma`` in float32, so two calls that consume the stream
    identically differ exactly by the ratio of their gammas whenever that
    ratio is applied to the gamma=1 draw.
    """
    _check_init_args(gain, scale_gamma)
    std = gain / math.sqrt(fan_in(shape))
    base = (rng.standard_normal(tuple(shape)) * std).astype(DTYPE)
    return base * DTYPE(scale_gamma)


def kaiming_uniform_init(shape: Sequence[int], gain: float, scale_gamma: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Samples from U(-scale_gamma*bound, +scale_gamma*bound), bound = gain*sqrt(3/fan_in)."""
    _check_init_args(gain, scale_gamma)
    bound = gain * math.sqrt(3.0 / fan_in(shape))
    base = rng.uniform(-bound, bound, size=tuple(shape)).astype(DTYPE)
    return base * DTYPE(scale_gamma)


def kaiming_std(shape: Sequence[int], gain: float = math.sqrt(2.0), scale_gamma: float = 1.0) -> float:
    return scale_gamma * gain / math.sqrt(fan_in(shape))


def kaiming_bound(shape: Sequence[int], gain: float = math.sqrt(2.0), scale_gamma: float = 1.0) -> float:
    return scale_gamma * gain * math.sqrt(3.0 / fan_in(shape))


# ---------------------------------------------------------------------------
# elementwise / reductions
# ---------------------------------------------------------------------------


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "hadamard")
    return a * b


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return a * a.dtype.type(c)


def sum_(a: np.ndarray, axis=None) -> np.ndarray | float:
    out = np.sum(a, axis=axis, dtype=np.float64)
    return float(out) if axis is None else out.astype(a.dtype)


def mean(a: np.ndarray, axis=None) -> np.ndarray | float:
    out = np.mean(a, axis=axis, dtype=np.float64)
    return float(out) if axis is None else out.astype(a.dtype)


def var(a: np.ndarray, axis=None) -> np.ndarray | float:
    """Biased (population) variance with a float64 accumulator."""
    out = np.var(a, axis=axis, dtype=np.float64)
    return float(out) if axis is None else out.astype(a.dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ w.T + b with a float64 accumulator and a per-row summation order.

    Unlike BLAS, each output row depends only on its own input row, so results
    do not change with batch size.
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: incompatible shapes x{x.shape}, w{w.shape}, b{b.shape}")
    acc = (x[:, None, :].astype(np.float64) * w[None].astype(np.float64)).sum(axis=2)
    return (acc + b).astype(x.dtype)


def channel_view(v: np.ndarray, ndim: int = 4) -> np.ndarray:
    """Reshape a per-channel vector so it broadcasts against axis 1."""
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def assert_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} has {bad} non-finite value(s)")
    return x


def filter_norms(w: np.ndarray) -> np.ndarray:
    """Frobenius norm of every filter (slice along the leading axis), float64."""
    if w.ndim < 2:
        raise ShapeError(f"filter_norms needs >= 2 dims, got shape {w.shape}")
    flat = w.reshape(w.shape[0], -1).astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", flat, flat))


# ---------------------------------------------------------------------------
# convolution primitives (NCHW, cross-correlation)
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(f"kernel {kernel} with stride {stride}, padding {padding} "
                         f"does not fit input extent {size}")
    return out


def pad_nchw(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
           pad_value: float = 0.0) -> np.ndarray:
    """Patches of shape (N, Ho, Wo, C*kh*kw), patch layout (c, i, j) row-major."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = pad_nchw(x, padding, pad_value)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape: Sequence[int], kh: int, kw: int,
           stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    n, c, h, w = x_shape
    _, ho, wo, _ = cols.shape
    g = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += \
                g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
           pad_value: float = 0.0) -> np.ndarray:
    """Cross-correlation of NCHW input with (C_out, C_in, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    cout, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, padding, pad_value)
    out = cols @ w.reshape(cout, -1).T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape: Sequence[int],
                    stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. the weight and the (unpadded) input."""
    cout, _, kh, kw = w.shape
    d = dout.transpose(0, 2, 3, 1)  # (N, Ho, Wo, Cout)
    d2 = d.reshape(-1, cout)
    grad_w = (d2.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    dcols = (d2 @ w.reshape(cout, -1)).reshape(cols.shape)
    grad_x = col2im(dcols, x_shape, kh, kw, stride, padding)
    return grad_w, grad_x
