"""SGT1 binary tensor files.

Layout: ``b"SGT1"``, u8 rank, rank x u32 little-endian dims, then the row-major
float32 little-endian payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SGT1"


class SGTFormatError(ValueError):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = path
        self.offset = offset


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("SGT1 rank must fit in one byte")
    if any(d >= 2 ** 32 for d in arr.shape):
        raise ValueError(f"SGT1 dims must fit in u32, got {arr.shape}")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 5:
        raise SGTFormatError(path, len(buf), "truncated header")
    if buf[:4] != MAGIC:
        raise SGTFormatError(path, 0, f"bad magic {buf[:4]!r}")
    rank = buf[4]
    dims_end = 5 + 4 * rank
    if len(buf) < dims_end:
        raise SGTFormatError(path, len(buf), f"truncated dims, rank {rank}")
    dims = struct.unpack(f"<{rank}I", buf[5:dims_end])
    count = 1
    for d in dims:
        count *= d
    need = dims_end + 4 * count
    if need > len(buf):
        raise SGTFormatError(path, len(buf),
                             f"truncated payload: dims {dims} need {need} bytes, have {len(buf)}")
    if need < len(buf):
        raise SGTFormatError(path, need, f"{len(buf) - need} trailing bytes")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end).astype(np.float64).reshape(dims)


def save(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), path)
