"""Binary tensor container.

A file is a concatenation of records, all little-endian::

    magic    4 bytes  b"GDR2"
    version  u16      1
    dtype    u8       1 = binary32, 2 = binary64
    ndim     u8
    dims     u64 x ndim
    name     u32 byte length + UTF-8 bytes
    payload  row-major values, prod(dims) x itemsize bytes
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GDR2"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFileError(ValueError):
    """Malformed tensor file; carries the failing field and byte offset."""

    def __init__(self, field: str, offset: int, message: str):
        super().__init__(f"{field} at byte {offset}: {message}")
        self.field = field
        self.offset = offset


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODE_OF:
            raise TypeError(f"{name}: only float32/float64 tensors can be stored, got {arr.dtype}")
        if arr.ndim > 255:
            raise ValueError(f"{name}: too many dimensions")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: tensor contains NaN or Inf")
        raw_name = name.encode("utf-8")
        out += MAGIC
        out += struct.pack("<HBB", VERSION, CODE_OF[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return bytes(out)


def decode(data: bytes, expect_dtype=None) -> dict[str, np.ndarray]:
    """Parse records. ``expect_dtype`` rejects tensors stored in another precision."""
    want = None if expect_dtype is None else np.dtype(expect_dtype)
    tensors: dict[str, np.ndarray] = {}
    pos = 0
    n = len(data)

    def need(size: int, field: str):
        if pos + size > n:
            raise TensorFileError(field, pos, f"truncated: need {size} bytes, {n - pos} left")

    while pos < n:
        need(4, "magic")
        if data[pos:pos + 4] != MAGIC:
            raise TensorFileError("magic", pos, f"expected {MAGIC!r}, got {bytes(data[pos:pos + 4])!r}")
        pos += 4
        need(4, "header")
        version, code, ndim = struct.unpack_from("<HBB", data, pos)
        if version != VERSION:
            raise TensorFileError("version", pos, f"unsupported version {version}")
        if code not in DTYPE_CODES:
            raise TensorFileError("dtype", pos + 2, f"unknown dtype code {code}")
        dtype = DTYPE_CODES[code]
        if want is not None and dtype != want.newbyteorder("<"):
            raise TensorFileError("dtype", pos + 2, f"stored {dtype.name}, expected {want.name}")
        pos += 4
        need(8 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        need(4, "name")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(name_len, "name")
        try:
            name = bytes(data[pos:pos + name_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFileError("name", pos, "invalid UTF-8") from exc
        pos += name_len
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        need(size, "payload")
        arr = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
        pos += size
    return tensors


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def read_tensors(path, expect_dtype=None) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), expect_dtype)
