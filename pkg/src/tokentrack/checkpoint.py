"""Bit-exact binary checkpoint format.

Layout (all integers little-endian):
  magic "LMTK" | version u32 | entry count u32
  per entry: name length u32 | UTF-8 name | dtype code u32 (0 = f32)
             | rank u32 | dims (u64 each) | raw little-endian scalars
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LMTK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(RuntimeError):
    pass


def save(path, entries):
    """Write named arrays. ``entries`` is a dict or iterable of (name, array)."""
    if isinstance(entries, dict):
        entries = entries.items()
    # ascontiguousarray promotes 0-d to 1-d, so restore the original shape
    entries = [(name, np.ascontiguousarray(arr).reshape(np.shape(arr)))
               for name, arr in entries]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for entry '{name}'")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", code, arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load(path):
    """Read a checkpoint back into an ordered dict of name -> array."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            code, rank = struct.unpack("<II", fh.read(8))
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            dtype = _DTYPES[code]
            n = int(np.prod(dims)) if dims else 1
            buf = fh.read(n * dtype.itemsize)
            if len(buf) != n * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated entry '{name}'")
            out[name] = np.frombuffer(buf, dtype=dtype).reshape(dims).copy()
    return out
