"""Flat binary checkpoint container with a byte-exact round-trip guarantee.

Layout (all integers little-endian):
    magic        6 bytes  b"DITHC1"
    dtype code   u8       0 = f32, 1 = f64
    tensor count u32
    per tensor:
      name length u16, name utf-8 bytes,
      rank u8, extents u32 * rank,
      raw element data, little-endian, row-major
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"DITHC1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path: str, tensors: "OrderedDict[str, np.ndarray] | dict",
                    dtype=None) -> None:
    items = list(tensors.items())
    arrays = []
    for name, arr in items:
        a = arr.data if hasattr(arr, "data") and hasattr(arr, "dtype") and not isinstance(arr, np.ndarray) else np.asarray(arr)
        a = np.asarray(a)
        arrays.append((name, a))
    if dtype is None:
        dtype = arrays[0][1].dtype if arrays else np.dtype(np.float32)
    dtype = np.dtype(dtype)
    if dtype not in _CODE_FOR:
        raise ValueError(f"unsupported checkpoint dtype {dtype}")
    code = _CODE_FOR[dtype]
    le = _DTYPE_CODES[code]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", code, len(arrays)))
        for name, a in arrays:
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name!r}")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            if a.ndim > 0xFF:
                raise ValueError("tensor rank exceeds container limit")
            f.write(struct.pack("<B", a.ndim))
            for ext in a.shape:
                f.write(struct.pack("<I", ext))
            f.write(np.ascontiguousarray(a, dtype=le).tobytes())


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as f:
        magic = f.read(6)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        code, count = struct.unpack("<BI", f.read(5))
        if code not in _DTYPE_CODES:
            raise ValueError(f"unknown dtype code {code}")
        dt = _DTYPE_CODES[code]
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            extents = [struct.unpack("<I", f.read(4))[0] for _ in range(rank)]
            n_elems = 1
            for e in extents:
                n_elems *= e
            raw = f.read(n_elems * dt.itemsize)
            if len(raw) != n_elems * dt.itemsize:
                raise ValueError(f"truncated tensor data for {name!r}")
            out[name] = np.frombuffer(raw, dtype=dt).reshape(extents).copy()
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after final tensor")
    return out
