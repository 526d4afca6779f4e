"""Binary tensor container: magic, JSON header, little-endian payloads.

Layout::

    magic        8 bytes  (b"OVSWCKPT" for checkpoints, b"OVSWPACK" for packed models)
    header_len   uint32 little-endian
    header       UTF-8 JSON, keys sorted, no whitespace
    payload      tensors back to back in manifest order

The header always carries ``format_version`` and ``tensors``, a list of
``{name, shape, dtype, offset, nbytes}`` where ``offset`` counts from the first
payload byte and ``dtype`` is ``"float32"``, ``"float64"`` or ``"uint64"`` (all little-endian).
Model weights are always float32; float64 is used only for optimizer flip state.
Any other header keys are caller metadata.
"""
from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"OVSWCKPT"
PACKED_MAGIC = b"OVSWPACK"

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "uint64": np.dtype("<u8")}


class ContainerError(ValueError):
    pass


def _dtype_name(a: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if a.dtype.kind == dt.kind and a.dtype.itemsize == dt.itemsize:
            return name
    raise ContainerError(f"unsupported dtype {a.dtype}; container stores float32, float64 or uint64")


def dumps(magic: bytes, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        dname = _dtype_name(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dname,
                         "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = dict(meta or {})
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = manifest
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container; returns (header, tensors). Tensors are fresh writable arrays."""
    if len(blob) < len(magic) + 4:
        raise ContainerError("truncated container: shorter than magic + header length")
    found = blob[: len(magic)]
    if found != magic:
        raise ContainerError(f"bad magic: expected {magic!r}, found {found!r}")
    (hlen,) = struct.unpack_from("<I", blob, len(magic))
    start = len(magic) + 4
    if len(blob) < start + hlen:
        raise ContainerError("truncated container header")
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported format_version {header.get('format_version')!r}")
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise ContainerError(f"truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(blob[lo:hi], dtype=dt).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return header, tensors
