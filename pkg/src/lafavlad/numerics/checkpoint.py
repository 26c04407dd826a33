"""Versioned flat-file checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"LAFAVLAD"
    version    uint32
    count      uint32
    repeated count times:
        name_len   uint32
        name       name_len bytes, UTF-8
        rank       uint32
        extents    rank x uint64
        payload    prod(extents) x float64, row-major
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"LAFAVLAD"
VERSION = 1


def write_arrays(path, arrays: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major; keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos} (needed {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupt parameter name") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(store, path) -> None:
    write_arrays(path, store.state())


def load_checkpoint(store, path) -> None:
    arrays = read_arrays(path)
    try:
        store.load_state(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
