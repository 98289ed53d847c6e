"""Flat binary layout shared by sample dumps, datasets and poses.

Layout (all little-endian)::

    8 bytes   magic b"MESHDIF1"
    5 x int64 V, J, K, n_records, record_len
    n_records * record_len float64, row-major

``record_len`` is fixed by the writer; e.g. trace dumps store ``h_k`` then
``h0_hat`` (``6 V`` values), datasets store the mesh then the pose
(``3 V + 3 J`` values).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MESHDIF1"
_HEADER = np.dtype("<i8")


@dataclass(frozen=True)
class FlatHeader:
    V: int
    J: int
    K: int
    n_records: int
    record_len: int


def write_flat(path, records, V: int, J: int, K: int) -> FlatHeader:
    rec = np.ascontiguousarray(records, dtype="<f8")
    rec = rec.reshape(rec.shape[0], -1) if rec.ndim > 1 else rec.reshape(1, -1)
    header = FlatHeader(V, J, K, rec.shape[0], rec.shape[1])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([V, J, K, *rec.shape], dtype=_HEADER).tobytes())
        fh.write(rec.tobytes(order="C"))
    return header


def read_flat(path) -> tuple[FlatHeader, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a flat mesh file")
    dims = np.frombuffer(raw[8:48], dtype=_HEADER)
    header = FlatHeader(*(int(d) for d in dims))
    data = np.frombuffer(raw[48:], dtype="<f8")
    expected = header.n_records * header.record_len
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {data.size}")
    return header, data.reshape(header.n_records, header.record_len).astype(np.float64)
