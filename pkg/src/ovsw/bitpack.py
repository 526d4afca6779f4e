"""Inference-only engine: sign bit-packing, XNOR-popcount convolution, BN folding, export.

Bit convention: bit 1 encodes +1, bit 0 encodes -1.  Rows are packed
least-significant-bit first into little-endian uint64 words; element ``i`` of a
row lands in word ``i // 64`` at bit ``i % 64``.  Bits past ``n_valid`` in the
last word are zero.  For conv weights a row is one filter flattened as
(C_in, K_h, K_w); activation patches use the same order, so a patch row and a
filter row line up bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import container, tensor as T
from .checkpoint import checkpoint_bytes
from .network import BinaryNet, ModelSpec, bn_eval_affine, shortcut_forward

WORD_BITS = 64

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount_portable(x: np.ndarray) -> np.ndarray:
    """SWAR popcount of uint64 words."""
    x = np.asarray(x, dtype=np.uint64)
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return ((x * _H01) >> np.uint64(56)).astype(np.int64)


def popcount_native(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(x, dtype=np.uint64)).astype(np.int64)


popcount = popcount_native if hasattr(np, "bitwise_count") else popcount_portable


@dataclass
class PackedTensor:
    logical_shape: tuple
    words: np.ndarray  # (rows, n_words) uint64
    n_valid: int

    @property
    def rows(self) -> int:
        return self.words.shape[0]


def words_for(n_valid: int) -> int:
    return -(-n_valid // WORD_BITS)


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """(rows, n) array of 0/1 -> (rows, n_words) uint64."""
    rows, n = bits.shape
    nw = words_for(n)
    padded = np.zeros((rows, nw * WORD_BITS), np.uint8)
    padded[:, :n] = bits
    return np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)


def pack(x: np.ndarray) -> PackedTensor:
    """Pack sign(x) row-wise. 1-D input is one row; otherwise rows run along axis 0."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise ValueError("pack: input contains NaN")
    rows = x.reshape(1, -1) if x.ndim == 1 else x.reshape(x.shape[0], -1)
    return PackedTensor(tuple(x.shape), _pack_bits((rows >= 0).astype(np.uint8)), rows.shape[1])


def unpack(p: PackedTensor) -> np.ndarray:
    b = np.unpackbits(p.words.astype("<u8").view(np.uint8), axis=1, bitorder="little")[:, : p.n_valid]
    return (b.astype(np.float32) * 2 - 1).reshape(p.logical_shape)


def valid_mask(n_valid: int) -> np.ndarray:
    nw = words_for(n_valid)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = n_valid % WORD_BITS
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def xnor_popcount_dot(a: PackedTensor, w: PackedTensor, row_a: int = 0, row_w: int = 0,
                      popcount_fn=None) -> int:
    """±1 dot product of one packed row of ``a`` with one of ``w``."""
    if a.n_valid != w.n_valid:
        raise ValueError(f"n_valid mismatch: {a.n_valid} vs {w.n_valid}")
    pc = popcount_fn or popcount
    x = ~(a.words[row_a] ^ w.words[row_w]) & valid_mask(a.n_valid)
    matches = int(pc(x).sum())
    return 2 * matches - a.n_valid


def xnor_popcount_matmul(a_words: np.ndarray, w_words: np.ndarray, n_valid: int,
                         popcount_fn=None) -> np.ndarray:
    """All-pairs ±1 dot products: (P, nw) x (C, nw) -> (P, C) int64."""
    pc = popcount_fn or popcount
    mask = valid_mask(n_valid)
    matches = np.zeros((a_words.shape[0], w_words.shape[0]), np.int64)
    for k in range(a_words.shape[1]):
        matches += pc(~(a_words[:, k, None] ^ w_words[None, :, k]) & mask[k])
    return 2 * matches - n_valid


# ---------------------------------------------------------------------------
# folding and packed model
# ---------------------------------------------------------------------------


@dataclass
class FoldedAffine:
    scale: np.ndarray
    bias: np.ndarray


def fold_bn(alpha, bn_gamma, bn_beta, running_mean, running_var, eps) -> FoldedAffine:
    """Per-channel affine equal to eval-mode BN(alpha * raw)."""
    s, b = bn_eval_affine(bn_gamma, bn_beta, running_mean, running_var, eps)
    scale = np.asarray(alpha, np.float64) * s
    out = FoldedAffine(scale.astype(np.float32), b.astype(np.float32))
    T.assert_finite(out.scale, "folded scale")
    T.assert_finite(out.bias, "folded bias")
    return out


@dataclass
class PackedBlock:
    weights: PackedTensor
    affine: FoldedAffine
    stride: int
    padding: int
    shortcut: bool


@dataclass
class PackedModel:
    spec: ModelSpec
    stem_weight: np.ndarray
    stem_affine: FoldedAffine
    stem_stride: int
    stem_padding: int
    blocks: list[PackedBlock]
    head_weight: np.ndarray
    head_bias: np.ndarray
    format_version: int = container.FORMAT_VERSION


def pack_model(model: BinaryNet) -> PackedModel:
    st = model.stem
    s, b = bn_eval_affine(st.bn_gamma, st.bn_beta, st.bn_running_mean, st.bn_running_var, st.bn_eps)
    blocks = []
    for ls in model.blocks:
        blocks.append(PackedBlock(
            pack(ls.W),
            fold_bn(ls.alpha, ls.bn_gamma, ls.bn_beta, ls.bn_running_mean, ls.bn_running_var, ls.bn_eps),
            ls.stride, ls.padding, ls.shortcut))
    return PackedModel(model.spec, st.W.copy(), FoldedAffine(s.astype(np.float32), b.astype(np.float32)),
                       st.stride, st.padding, blocks, model.head.W.copy(), model.head.b.copy())


def packed_conv_raw(a: np.ndarray, block: PackedBlock, popcount_fn=None) -> np.ndarray:
    """Integer conv of sign(a) with the packed filters; padded cells read as +1."""
    cout, cin, kh, kw = block.weights.logical_shape
    if a.shape[1] != cin:
        raise T.ShapeError(f"packed block expects {cin} channels, got input {a.shape}")
    bits = (a >= 0).astype(np.uint8)
    patches = T.im2col(bits, kh, kw, block.stride, block.padding, pad_value=1)
    n, ho, wo, k = patches.shape
    a_words = _pack_bits(patches.reshape(-1, k))
    raw = xnor_popcount_matmul(a_words, block.weights.words, block.weights.n_valid, popcount_fn)
    return raw.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def packed_infer(model: PackedModel, x: np.ndarray, popcount_fn=None) -> np.ndarray:
    spec = model.spec
    if x.ndim != 4 or x.shape[1:] != (spec.in_channels, spec.image_size, spec.image_size):
        raise T.ShapeError(f"input {x.shape} does not match model input "
                           f"({spec.in_channels}, {spec.image_size}, {spec.image_size})")
    x = x.astype(np.float32, copy=False)
    z = T.conv2d(x, model.stem_weight, model.stem_stride, model.stem_padding)
    a = z * T.channel_view(model.stem_affine.scale) + T.channel_view(model.stem_affine.bias)
    for blk in model.blocks:
        raw = packed_conv_raw(a, blk, popcount_fn).astype(np.float32)
        y = raw * T.channel_view(blk.affine.scale) + T.channel_view(blk.affine.bias)
        if blk.shortcut:
            y = y + shortcut_forward(a, y.shape)
        a = y
    feat = a.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)
    return T.linear(feat, model.head_weight, model.head_bias)


def packed_predict(model: PackedModel, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
    out = [packed_infer(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes), np.float32)


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------


def export(model: PackedModel) -> bytes:
    tensors = {"stem.weight": model.stem_weight, "stem.scale": model.stem_affine.scale,
               "stem.bias": model.stem_affine.bias}
    blocks_meta = []
    for i, blk in enumerate(model.blocks):
        tensors[f"blocks.{i}.words"] = blk.weights.words
        tensors[f"blocks.{i}.scale"] = blk.affine.scale
        tensors[f"blocks.{i}.bias"] = blk.affine.bias
        blocks_meta.append({"logical_shape": list(blk.weights.logical_shape), "n_valid": blk.weights.n_valid,
                            "stride": blk.stride, "padding": blk.padding, "shortcut": blk.shortcut})
    tensors["head.weight"] = model.head_weight
    tensors["head.bias"] = model.head_bias
    header = {"kind": "packed_model", "model_spec": model.spec.to_dict(), "blocks": blocks_meta,
              "stem": {"stride": model.stem_stride, "padding": model.stem_padding},
              "bit_convention": "bit1=+1,bit0=-1,lsb-first,uint64-le"}
    return container.dumps(container.PACKED_MAGIC, tensors, header)


def import_(blob: bytes) -> PackedModel:
    header, t = container.loads(blob, container.PACKED_MAGIC)
    if header.get("kind") != "packed_model":
        raise container.ContainerError(f"not a packed model container (kind={header.get('kind')!r})")
    blocks = []
    for i, meta in enumerate(header["blocks"]):
        pt = PackedTensor(tuple(meta["logical_shape"]), t[f"blocks.{i}.words"], meta["n_valid"])
        blocks.append(PackedBlock(pt, FoldedAffine(t[f"blocks.{i}.scale"], t[f"blocks.{i}.bias"]),
                                  meta["stride"], meta["padding"], meta["shortcut"]))
    return PackedModel(ModelSpec.from_dict(header["model_spec"]), t["stem.weight"],
                       FoldedAffine(t["stem.scale"], t["stem.bias"]),
                       header["stem"]["stride"], header["stem"]["padding"],
                       blocks, t["head.weight"], t["head.bias"], header["format_version"])


def tensor_sizes(w: np.ndarray) -> dict:
    """fp32 vs packed bytes for one binarized weight tensor (filters padded to whole words)."""
    p = pack(w)
    packed = p.words.size * 8
    return {"elements": int(w.size), "bytes_fp32": int(w.size * 4), "bytes_packed": int(packed),
            "ratio": w.size * 4 / packed}


def report_sizes(float_model: BinaryNet, packed_model: PackedModel) -> dict:
    """Whole-model serialized sizes: float checkpoint (weights only) vs packed export."""
    fp32 = len(checkpoint_bytes(float_model))
    packed = len(export(packed_model))
    return {"bytes_fp32": fp32, "bytes_packed": packed, "ratio": fp32 / packed}


def report_json(float_model: BinaryNet, packed_model: PackedModel) -> str:
    return json.dumps(report_sizes(float_model, packed_model), sort_keys=True)
