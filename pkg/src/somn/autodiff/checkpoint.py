"""Binary checkpoint format for named parameter sets.

Layout (all integers little-endian):

    magic   4 bytes  b"SOMN"
    version u32      currently 1
    then one record per parameter, sorted by name:
        name_len u32, name UTF-8 bytes
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     ndim x u64
        values   raw little-endian array data, C order

Records are read until EOF. Writing the same parameters twice yields
byte-identical files, so equality of file hashes certifies that a
parameter set did not change.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from ..errors import DataError
from .tensor import Tensor

MAGIC = b"SOMN"
VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_TO_TAG = {"f4": 0, "f8": 1}


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if key not in _KIND_TO_TAG:
        raise DataError(f"checkpoint supports float32/float64 only, got {arr.dtype}")
    return arr


def save_checkpoint(path: str, params: Mapping[str, Tensor | np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in sorted(params):
            arr = _as_array(params[name])
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            tag = _KIND_TO_TAG[f"{arr.dtype.kind}{arr.dtype.itemsize}"]
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    if len(blob) < 8:
        raise DataError(f"{path}: truncated checkpoint header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")

    params: dict[str, np.ndarray] = {}
    off = 8
    total = len(blob)
    while off < total:
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            tag, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
        except (struct.error, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: corrupt checkpoint record at offset {off}") from exc
        if tag not in _TAG_TO_DTYPE:
            raise DataError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dtype = _TAG_TO_DTYPE[tag]
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > total:
            raise DataError(f"{path}: truncated values for {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(dims)
        off += nbytes
        params[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return params


def restore_into(params: Mapping[str, Tensor], loaded: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into live tensors, checking names and shapes."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise DataError(f"checkpoint shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.dtype, copy=True)
