"""Binary container for named f64 arrays.

Layout: the magic string "CSTTE1", then for each array, in order:
name length (u64 LE), UTF-8 name bytes, rank (u64 LE), one extent per axis
(u64 LE each), then the row-major little-endian float64 payload. Entries
run to end of file; round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from cstte.errors import DataError

CONTAINER_MAGIC = b"CSTTE1"
_U64 = struct.Struct("<Q")


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        for name, arr in arrays.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(_U64.pack(len(name_bytes)))
            fh.write(name_bytes)
            fh.write(_U64.pack(arr.ndim))
            for extent in arr.shape:
                fh.write(_U64.pack(extent))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated container: expected {n} bytes for {what}")
    return buf


def read_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CONTAINER_MAGIC))
        if magic != CONTAINER_MAGIC:
            raise DataError(f"{path}: not a {CONTAINER_MAGIC.decode()} container")
        while True:
            head = fh.read(_U64.size)
            if not head:
                break
            if len(head) != _U64.size:
                raise DataError("truncated container: partial name length")
            (name_len,) = _U64.unpack(head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = _U64.unpack(_read_exact(fh, _U64.size, "rank"))
            shape = tuple(
                _U64.unpack(_read_exact(fh, _U64.size, "extent"))[0] for _ in range(rank)
            )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read_exact(fh, count * 8, f"array {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return arrays
