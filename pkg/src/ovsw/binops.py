"""Binarization kernels: sign, gradient estimators, and float-simulated binary convolution.

Weights always go through the identity straight-through estimator, activations
through the piecewise-polynomial estimator.  Zero binarizes to +1, and so does
spatial padding of binarized activations.
"""
from __future__ import annotations

import enum

import numpy as np

from .tensor import ShapeError, channel_view, im2col

BINARY_PAD_VALUE = 1.0


class BinGradKind(enum.Enum):
    STE_IDENTITY = "ste_identity"
    POLY_APPROX = "poly_approx"


WEIGHT_GRAD_KIND = BinGradKind.STE_IDENTITY
ACTIVATION_GRAD_KIND = BinGradKind.POLY_APPROX


def sign(x: np.ndarray) -> np.ndarray:
    """+1 where x >= 0, -1 elsewhere; NaN is rejected."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise ValueError("sign: input contains NaN")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    return np.where(x >= 0, 1, -1).astype(dtype)


def ste_backward(upstream: np.ndarray) -> np.ndarray:
    return upstream


def poly_grad(a: np.ndarray) -> np.ndarray:
    """Derivative of the piecewise quadratic sign surrogate.

    2+2a on [-1, 0), 2-2a on [0, 1), 0 elsewhere; all three pieces equal
    max(0, 2-2|a|), including the endpoints.
    """
    return np.maximum(0, 2 - 2 * np.abs(a)).astype(a.dtype, copy=False)


def poly_backward(a: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if a.shape != upstream.shape:
        raise ShapeError(f"poly_backward: activation {a.shape} vs upstream {upstream.shape}")
    return upstream * poly_grad(a)


def _check_pm1(x: np.ndarray, what: str) -> None:
    if not np.all(np.abs(x) == 1):
        raise ValueError(f"{what} must contain only +1/-1")


def binary_conv_raw(a_bin: np.ndarray, w_bin: np.ndarray, stride: int, padding: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Integer-valued ±1 cross-correlation and the im2col patches it used."""
    if a_bin.ndim != 4 or w_bin.ndim != 4 or a_bin.shape[1] != w_bin.shape[1]:
        raise ShapeError(f"binary conv: input {a_bin.shape} incompatible with weight {w_bin.shape}")
    cout, _, kh, kw = w_bin.shape
    cols = im2col(a_bin, kh, kw, stride, padding, pad_value=BINARY_PAD_VALUE)
    out = cols @ w_bin.reshape(cout, -1).T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def binary_conv_forward(a_bin: np.ndarray, w_bin: np.ndarray, alpha: np.ndarray,
                        stride: int = 1, padding: int = 0) -> np.ndarray:
    """(a_bin ⊛ w_bin) scaled per output channel by ``alpha``."""
    _check_pm1(a_bin, "a_bin")
    _check_pm1(w_bin, "w_bin")
    if alpha.shape != (w_bin.shape[0],):
        raise ShapeError(f"alpha shape {alpha.shape} does not match C_out={w_bin.shape[0]}")
    raw, _ = binary_conv_raw(a_bin, w_bin, stride, padding)
    return raw * channel_view(alpha.astype(raw.dtype))
