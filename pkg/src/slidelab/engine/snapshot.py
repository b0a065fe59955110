"""Tensor snapshot files.

Layout (little-endian): magic b"HPTF", u32 version (1), u8 dtype code,
u8 rank, rank x u64 extents, then the row-major payload. Used for model
checkpoints and extracted features.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"HPTF"
VERSION = 1
_DTYPE_CODES = {1: "<f4", 2: "<f8"}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_snapshot(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim:  # ascontiguousarray would promote rank-0 to rank-1
        arr = np.ascontiguousarray(arr)
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise DataError(f"snapshot supports f32/f64 payloads, got {arr.dtype}")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_snapshot(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a tensor snapshot (bad magic)")
    version, code, rank = struct.unpack("<IBB", raw[4:10])
    if version != VERSION:
        raise DataError(f"{path}: unsupported snapshot version {version}")
    if code not in _DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    offset = 10 + 8 * rank
    if len(raw) < offset:
        raise DataError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}Q", raw[10:offset]) if rank else ()
    dt = np.dtype(_DTYPE_CODES[code])
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return np.ascontiguousarray(arr) if arr.ndim else arr.copy()
