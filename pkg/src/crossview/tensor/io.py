"""CVT1 tensor container files.

Layout: magic ``b"CVT1"``, ``u8`` ndim, ``ndim`` little-endian ``u32`` extents,
then the row-major little-endian ``f32`` payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVT1"


class FormatError(ValueError):
    pass


def to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError("too many axes")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    ndim = buf[4]
    off = 5 + 4 * ndim
    shape = struct.unpack(f"<{ndim}I", buf[5:off])
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - off != 4 * count:
        raise FormatError(f"payload holds {len(buf) - off} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float32).reshape(shape)


def save(path, arr) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
