"""Tokenized-corpus files.

Each record is a little-endian header ``(n_measures:u32, n_tracks:u32, L:u32)``
followed by ``n_measures * n_tracks * L`` token ids as ``u16``, measure-major
then track-major. A file is the concatenation of its records.
"""

from __future__ import annotations

import hashlib
import os
import struct
from typing import Iterable

import numpy as np

_HEADER = struct.Struct("<III")


class CorpusError(Exception):
    pass


def encode_record(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise CorpusError(f"record must be (n_measures, n_tracks, L), got {grid.shape}")
    if grid.min() < 0 or grid.max() > 0xFFFF:
        raise CorpusError("token id does not fit in 16 bits")
    return _HEADER.pack(*grid.shape) + grid.astype("<u2").tobytes()


def dumps(records: Iterable[np.ndarray]) -> bytes:
    return b"".join(encode_record(r) for r in records)


def loads(data: bytes) -> list[np.ndarray]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + _HEADER.size > len(data):
            raise CorpusError(f"truncated record header at offset {pos}")
        shape = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        nbytes = 2 * shape[0] * shape[1] * shape[2]
        if pos + nbytes > len(data):
            raise CorpusError(f"truncated record body at offset {pos}")
        arr = np.frombuffer(data, dtype="<u2", count=nbytes // 2, offset=pos)
        out.append(arr.reshape(shape).astype(np.int64))
        pos += nbytes
    return out


def write_corpus(path: str | os.PathLike, records: Iterable[np.ndarray]) -> int:
    data = dumps(records)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def read_corpus(path: str | os.PathLike) -> list[np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())


def corpus_digest(path: str | os.PathLike) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
