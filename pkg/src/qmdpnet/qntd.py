"""QNTD tensor files.

Layout, all little-endian: the 4 magic bytes ``QNTD``, a u16 format version,
a u16 rank, ``rank`` u32 extents, then the row-major payload as float32 or
uint8. The element type is not stored in the file; the directory manifest
records it.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"QNTD"
VERSION = 1
DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class TensorFormatError(ValueError):
    pass


def encode(arr: np.ndarray, dtype: str) -> bytes:
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    a = np.asarray(arr)
    if dtype == "uint8" and a.size and (a.min() < 0 or a.max() > 255 or not np.array_equal(a, np.round(a))):
        raise ValueError("uint8 tensors hold integers in 0..255")
    payload = np.ascontiguousarray(a, dtype=DTYPES[dtype]).tobytes()
    header = MAGIC + struct.pack("<HH", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + payload


def decode(data: bytes, dtype: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if len(data) < 8 or data[:4] != MAGIC:
        raise TensorFormatError("bad magic: not a QNTD tensor file")
    version, rank = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported QNTD version {version}")
    head = 8 + 4 * rank
    if len(data) < head:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    if shape is not None and tuple(shape) != tuple(dims):
        raise TensorFormatError(f"shape {dims} disagrees with manifest {tuple(shape)}")
    dt = DTYPES[dtype]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(data) - head != need:
        raise TensorFormatError(f"payload has {len(data) - head} bytes, expected {need}")
    return np.frombuffer(data, dtype=dt, offset=head).reshape(dims).copy()


def save(path: str | Path, arr: np.ndarray, dtype: str) -> None:
    Path(path).write_bytes(encode(arr, dtype))


def load(path: str | Path, dtype: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
    return decode(Path(path).read_bytes(), dtype, shape)
