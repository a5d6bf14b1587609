"""Binary parameter files.

Layout (all integers unsigned 64-bit little-endian)::

    b"ATRK1"
    count
    count x { name_len, name (UTF-8), rank, dims[rank], values (float32 LE, row-major) }

Model checkpoints prepend a text header carrying the model and training
configuration::

    b"ATRKSPEC\\n"  header_len  header (UTF-8, ``key = value`` lines)  <ATRK1 block>
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import ContractError

MAGIC = b"ATRK1"
SPEC_MAGIC = b"ATRKSPEC\n"
_U64 = struct.Struct("<Q")


def _write_u64(f: BinaryIO, n: int) -> None:
    f.write(_U64.pack(n))


def _read_u64(f: BinaryIO) -> int:
    raw = f.read(8)
    if len(raw) != 8:
        raise ContractError("truncated checkpoint")
    return _U64.unpack(raw)[0]


def write_tensors(f: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    f.write(MAGIC)
    _write_u64(f, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        _write_u64(f, len(raw))
        f.write(raw)
        _write_u64(f, arr.ndim)
        for dim in arr.shape:
            _write_u64(f, dim)
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(f: BinaryIO) -> dict[str, np.ndarray]:
    if f.read(len(MAGIC)) != MAGIC:
        raise ContractError("not an ATRK1 parameter block")
    out: dict[str, np.ndarray] = {}
    for _ in range(_read_u64(f)):
        name = f.read(_read_u64(f)).decode("utf-8")
        rank = _read_u64(f)
        shape = tuple(_read_u64(f) for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = f.read(4 * count)
        if len(raw) != 4 * count:
            raise ContractError(f"truncated values for {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        write_tensors(f, tensors)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_tensors(f)


def save_checkpoint(path, header: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> None:
    text = "".join(f"{k} = {v}\n" for k, v in header.items()).encode("utf-8")
    buf = io.BytesIO()
    buf.write(SPEC_MAGIC)
    _write_u64(buf, len(text))
    buf.write(text)
    write_tensors(buf, tensors)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(SPEC_MAGIC)) != SPEC_MAGIC:
            raise ContractError(f"{path}: not a model checkpoint")
        text = f.read(_read_u64(f)).decode("utf-8")
        header = {}
        for line in text.splitlines():
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
        return header, read_tensors(f)
