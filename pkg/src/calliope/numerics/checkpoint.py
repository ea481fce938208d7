"""Binary container for named arrays (``CLLP`` files).

Layout, all little-endian::

    b"CLLP" | version:u32 | count:u32
    per entry: name_len:u32 | name:utf-8 | dtype:u8 | rank:u8 | dims:u32*rank | payload
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"CLLP"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<u8"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        code = _CODES.get(np.dtype(dt))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def _read(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def loads(data: bytes) -> dict[str, np.ndarray]:
    f = io.BytesIO(data)
    if _read(f, 4) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, count = struct.unpack("<II", _read(f, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read(f, 4))
        name = _read(f, n).decode("utf-8")
        code, rank = struct.unpack("<BB", _read(f, 2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(_read(f, size), dtype=dt).reshape(dims).copy()
    if f.read(1):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(dumps(entries))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
