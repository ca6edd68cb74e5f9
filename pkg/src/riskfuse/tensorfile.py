"""Flat binary matrix container.

Layout: 4-byte magic 'MMF1', u32 row count, u32 column count (little
endian), then rows*cols float32 values in row-major order. One matrix per
file; vectors are stored as a single row.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMF1"
_HEADER = struct.Struct("<II")

__all__ = ["MAGIC", "write_matrix", "read_matrix"]


def write_matrix(path, matrix) -> None:
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"matrix container stores 2-D data, got shape {arr.shape}")
    rows, cols = arr.shape
    payload = arr.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(rows, cols))
        fh.write(payload)


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 + _HEADER.size or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a matrix container (bad magic)")
    rows, cols = _HEADER.unpack_from(blob, 4)
    expected = 4 + _HEADER.size + rows * cols * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=4 + _HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)
