"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops or float64 straight-line
numpy and shares no code with the package, so agreement is meaningful.
"""
from __future__ import annotations

import math

import numpy as np


def loop_filter_norms(w) -> list[float]:
    out = []
    for k in range(w.shape[0]):
        s = 0.0
        for v in np.asarray(w[k], np.float64).ravel():
            s += float(v) * float(v)
        out.append(math.sqrt(s))
    return out


def loop_hadamard(a, b):
    out = np.empty(a.shape, np.float64)
    for idx in np.ndindex(a.shape):
        out[idx] = float(a[idx]) * float(b[idx])
    return out


def loop_conv2d(x, w, stride=1, padding=0, pad_value=0.0):
    """Direct NCHW cross-correlation in float64."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert ci == c
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), np.float64)
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                y, xx = i * stride + di - padding, j * stride + dj - padding
                                v = x[b, ch, y, xx] if 0 <= y < h and 0 <= xx < wd else pad_value
                                acc += float(v) * float(w[o, ch, di, dj])
                    out[b, o, i, j] = acc
    return out


def sign_ref(x):
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def poly_F(a: float) -> float:
    """Antiderivative of max(0, 2 - 2|a|) with F(-1) = -1."""
    if a < -1:
        return -1.0
    if a < 0:
        return a * a + 2 * a
    if a < 1:
        return -a * a + 2 * a
    return 1.0


def bn_train_ref(x, gamma, beta, eps):
    x = np.asarray(x, np.float64)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    g = np.asarray(gamma, np.float64).reshape(1, -1, 1, 1)
    b = np.asarray(beta, np.float64).reshape(1, -1, 1, 1)
    return g * (x - mu) / np.sqrt(var + eps) + b


def bn_eval_ref(x, gamma, beta, mean, var, eps):
    s = lambda v: np.asarray(v, np.float64).reshape(1, -1, 1, 1)
    return s(gamma) * (np.asarray(x, np.float64) - s(mean)) / np.sqrt(s(var) + eps) + s(beta)


def avg_pool2_ceil_ref(x):
    """2x2 stride-2 average pool, ceil mode, dividing by the number of in-bounds cells."""
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    out = np.zeros((n, c, ho, wo), np.float64)
    for i in range(ho):
        for j in range(wo):
            cells = [(y, xx) for y in (2 * i, 2 * i + 1) for xx in (2 * j, 2 * j + 1) if y < h and xx < w]
            out[:, :, i, j] = sum(x[:, :, y, xx].astype(np.float64) for y, xx in cells) / len(cells)
    return out


def shortcut_ref(a, out_shape):
    a = np.asarray(a, np.float64)
    if a.shape[2:] != tuple(out_shape[2:]):
        a = avg_pool2_ceil_ref(a)
    if a.shape[1] < out_shape[1]:
        pad = np.zeros((a.shape[0], out_shape[1] - a.shape[1]) + a.shape[2:])
        a = np.concatenate([a, pad], axis=1)
    return a


def block_forward_ref(W, alpha, gamma, beta, eps, a, stride, padding, shortcut):
    """Train-mode block output, straight line, no tape."""
    raw = loop_conv2d(sign_ref(a), sign_ref(W), stride, padding, pad_value=1.0)
    y = bn_train_ref(raw * np.asarray(alpha, np.float64).reshape(1, -1, 1, 1), gamma, beta, eps)
    if shortcut:
        y = y + shortcut_ref(a, y.shape)
    return y


def cross_entropy_ref(logits, labels) -> float:
    total = 0.0
    for row, y in zip(np.asarray(logits, np.float64), labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def momentum_step_ref(w, g, v, lr, momentum, wd):
    """Elementwise SGD-momentum with coupled weight decay; returns (w', v')."""
    w2, v2 = np.empty(w.shape, np.float64), np.empty(w.shape, np.float64)
    for idx in np.ndindex(w.shape):
        d = float(g[idx]) + wd * float(w[idx])
        v2[idx] = momentum * float(v[idx]) + d
        w2[idx] = float(w[idx]) - lr * v2[idx]
    return w2, v2


def flip_ema_ref(flips: list[int], m: float, s0: float = 0.0) -> list[float]:
    s, out = s0, []
    for f in flips:
        s = m * s + (1 - m) * f
        out.append(s)
    return out


def pm1_dot(a, b) -> int:
    return int(sum(int(x) * int(y) for x, y in zip(a, b)))
