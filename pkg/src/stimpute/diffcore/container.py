"""The STI1 tensor container.

Layout: ``b"STI1"``, u8 dtype code (0 = float64), u8 rank, ``rank`` x u64
dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STI1"
DTYPES = {0: np.dtype("<f8")}


class ContainerError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if arr.ndim > 255:
        raise ContainerError("rank above 255 is not representable")
    header = MAGIC + struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ContainerError("missing STI1 magic")
    if len(blob) < 6:
        raise ContainerError("truncated header")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    offset = 6 + 8 * rank
    if len(blob) < offset:
        raise ContainerError("truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", blob, 6)
    dtype = DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != offset + count * dtype.itemsize:
        raise ContainerError("payload length does not match dims")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims).astype(np.float64)


def save(path, array) -> None:
    Path(path).write_bytes(to_bytes(array))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
