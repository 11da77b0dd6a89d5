"""FNT1 binary tensor files.

Layout of one record: ``b"FNT1"``, u8 rank, rank x u32 LE extents, then a
float32 LE payload in row-major order.  A container is a plain
concatenation of records; names live in a side manifest.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FNT1"


class FNTError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def encode(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 255:
        raise ValueError("rank above 255 cannot be encoded")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FNTError("bad magic, expected FNT1", offset)
    if len(buf) < offset + 5:
        raise FNTError("truncated header", offset + 4)
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) < pos + 4 * rank:
        raise FNTError("truncated extents", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise FNTError(f"payload needs {4 * count} bytes, found {len(buf) - pos}", pos)
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64)
    return arr.reshape(shape), end


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arr) -> None:
    atomic_write(path, encode(arr))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise FNTError("trailing bytes after record", end)
    return arr


def save_many(path, arrays) -> None:
    atomic_write(path, b"".join(encode(a) for a in arrays))


def load_many(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = decode(buf, pos)
        out.append(arr)
    return out
