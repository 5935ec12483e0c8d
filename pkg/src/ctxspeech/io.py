"""Binary and JSON forms of tensors, and the named-tensor container.

Tensor binary layout (little-endian)::

    u32 rank | u32 dim[0] ... u32 dim[rank-1] | f64 payload (row-major)

Container layout::

    b"NTC1" | u32 count | count x (u32 name_len | utf-8 name | tensor)

Entries are written in sorted name order so identical contents give identical
bytes.
"""
from __future__ import annotations

import io as _io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"NTC1"


class FormatError(ValueError):
    """Malformed serialized tensor or container."""


def write_tensor(t: Tensor, fh: BinaryIO) -> None:
    shape = t.shape
    fh.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise FormatError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    n = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise FormatError(f"expected {n} float64 values for shape {shape}")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(shape))


def tensor_to_bytes(t: Tensor) -> bytes:
    buf = _io.BytesIO()
    write_tensor(t, buf)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    buf = _io.BytesIO(raw)
    t = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return t


def tensor_to_json(t: Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.flat()}


def tensor_from_json(obj: Mapping) -> Tensor:
    shape = tuple(int(d) for d in obj["shape"])
    data = np.asarray(obj["data"], dtype=np.float64)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"{data.size} values do not fill shape {shape}")
    return Tensor(data.reshape(shape))


def save_container(tensors: Mapping[str, Tensor], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(tensors[name], fh)


def load_container(path: str | Path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: not a named-tensor container")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, Tensor] = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            out[name] = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} entries")
    return out


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
