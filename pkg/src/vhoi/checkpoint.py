"""Binary checkpoint format for named parameters.

Layout (all integers little-endian uint32, floats little-endian float64):

    magic   5 bytes  b"STHOI"
    version uint32   currently 1
    count   uint32   number of parameters
    then per parameter, in the order given:
    name_len uint32, name utf-8 bytes, ndim uint32, dims uint32 each,
    raw float64 data (C order)

Round-trips are byte-exact: saving a loaded checkpoint reproduces the file.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .tensor import Parameter

MAGIC = b"STHOI"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_u32(buf: io.BufferedIOBase, value: int) -> None:
    buf.write(struct.pack("<I", value))


def _read_u32(buf: io.BufferedIOBase) -> int:
    raw = buf.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack("<I", raw)[0]


def save_checkpoint(path: str | Path, params: list[Parameter]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        _write_u32(f, VERSION)
        _write_u32(f, len(params))
        for p in params:
            name = p.name.encode("utf-8")
            _write_u32(f, len(name))
            f.write(name)
            _write_u32(f, p.ndim)
            for d in p.shape:
                _write_u32(f, d)
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> array mapping."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = _read_u32(f)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        count = _read_u32(f)
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = _read_u32(f)
            name = f.read(name_len).decode("utf-8")
            ndim = _read_u32(f)
            shape = tuple(_read_u32(f) for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"truncated data for parameter {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        return out
