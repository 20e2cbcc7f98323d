"""Little-endian binary container for named float64 tensors.

Layout::

    b"GRND" | version u32 | count u32
    per tensor: name_len u32 | name utf-8 | rank u32 | extents u32 * rank | float64 * n

Model files append further sections after the tensor block (see
``grounding.model``); the helpers here read and write length-prefixed strings
for that purpose.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"GRND"
VERSION = 1

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(_U32.pack(value))


def read_u32(fh: BinaryIO) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated file: expected u32")
    return _U32.unpack(raw)[0]


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u32(fh)
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated file: expected string bytes")
    return raw.decode("utf-8")


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    write_u32(fh, VERSION)
    write_u32(fh, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        write_str(fh, name)
        write_u32(fh, arr.ndim)
        for extent in arr.shape:
            write_u32(fh, extent)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(4) != MAGIC:
        raise FormatError("bad magic: not a GRND tensor file")
    version = read_u32(fh)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(read_u32(fh)):
        name = read_str(fh)
        shape = tuple(read_u32(fh) for _ in range(read_u32(fh)))
        n = int(np.prod(shape, dtype=np.int64))
        raw = fh.read(8 * n)
        if len(raw) != 8 * n:
            raise FormatError(f"truncated data for tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_tensors(fh)
