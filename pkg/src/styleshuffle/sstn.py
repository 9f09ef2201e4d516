"""SSTN v1 tensor files: the on-disk format for checkpoints and fixtures.

Layout (little-endian): magic bytes 53 53 54 4E, u32 version=1, u32 rank,
rank u32 dims, then prod(dims) float64 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSTN"
VERSION = 1


class SstnError(IOError):
    """Malformed, truncated, or wrong-version SSTN file."""


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise SstnError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise SstnError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise SstnError(f"{path}: unsupported version {version}")
    if len(raw) < 12 + 4 * rank:
        raise SstnError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    body = raw[12 + 4 * rank:]
    if len(body) != 8 * count:
        raise SstnError(
            f"{path}: expected {8 * count} payload bytes for dims {dims}, got {len(body)}"
        )
    return np.frombuffer(body, dtype="<f8").reshape(dims).copy()
