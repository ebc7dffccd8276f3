"""Versioned binary checkpoint: a table of named little-endian arrays."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADCK"
VERSION = 1
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def save_parameters(path, params: dict) -> None:
    with Path(path).open("wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name])
            dt = arr.dtype.newbyteorder("<")
            if dt not in _CODES:
                raise TypeError(f"cannot checkpoint dtype {arr.dtype} ({name})")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_parameters(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if raw[4] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {raw[4]}")
    (count,) = struct.unpack_from("<I", raw, 5)
    off = 9
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(raw, dt, count=size, offset=off).reshape(shape).copy()
        off += size * dt.itemsize
    return out
