"""``EMT1`` tensor files: magic, dtype code, rank, little-endian u64 dims, row-major LE payload."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EMT1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<c8"), 4: np.dtype("<c16")}
CODES = {v: k for k, v in DTYPES.items()}


class TensorFormatError(ValueError):
    pass


class BadMagic(TensorFormatError):
    pass


class DtypeMismatch(TensorFormatError):
    pass


class Truncated(TensorFormatError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in CODES:
        raise DtypeMismatch(f"unsupported dtype {arr.dtype}")
    head = MAGIC + struct.pack("<BB", CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, expect_dtype=None) -> np.ndarray:
    if len(buf) < 6:
        raise Truncated("file shorter than the header")
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPES:
        raise DtypeMismatch(f"unknown dtype code {code}")
    dt = DTYPES[code]
    if expect_dtype is not None and np.dtype(expect_dtype).newbyteorder("<") != dt:
        raise DtypeMismatch(f"file holds {dt}, expected {np.dtype(expect_dtype)}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise Truncated("header dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != size:
        raise Truncated(f"payload is {len(buf) - off} bytes, expected {size}")
    arr = np.frombuffer(buf, dtype=dt, offset=off, count=size // dt.itemsize).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save_tensor(path, arr) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def load_tensor(path, expect_dtype=None) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), expect_dtype)
