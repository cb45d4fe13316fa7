"""EBMFORGE binary tensor container.

Layout (all integers little-endian)::

    b"EBMFORGE"  u32 version
    repeated until EOF:
        u32 name_length, name (UTF-8)
        u64 rank, rank x u64 extents
        prod(extents) x f64 values (row-major)
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EBMFORGE"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "CheckpointError", "save_tensors", "load_tensors"]


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8").copy(order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an EBMFORGE checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 12, {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: tensor {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out
