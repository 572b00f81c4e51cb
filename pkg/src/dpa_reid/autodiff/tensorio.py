"""Binary tensor files (``DPAT``) and the named-tensor checkpoint container.

Tensor record layout (little-endian)::

    b"DPAT" | u8 rank | 4 x u32 extents | u8 dtype (0=f64, 1=f32) | payload

Unused extents are written as 1. A checkpoint container is::

    b"DPAC" | u32 index length | JSON index {name: offset} | DPAT records

with offsets counted from the first byte after the index.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import ParseError

MAGIC = b"DPAT"
CONTAINER_MAGIC = b"DPAC"
_HEADER = struct.Struct("<4sB4IB")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ValueError(f"rank {arr.ndim} > 4")
    if arr.dtype not in _TAGS:
        arr = arr.astype(np.float64)
    tag = _TAGS[arr.dtype]
    extents = list(arr.shape) + [1] * (4 - arr.ndim)
    header = _HEADER.pack(MAGIC, arr.ndim, *extents, tag)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record at ``offset``; returns the array and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise ParseError("truncated DPAT header")
    magic, rank, e0, e1, e2, e3, tag = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if rank > 4 or tag not in _DTYPES:
        raise ParseError(f"bad rank {rank} or dtype tag {tag}")
    shape = (e0, e1, e2, e3)[:rank]
    dtype = _DTYPES[tag]
    count = int(np.prod(shape)) if shape else 1
    start = offset + _HEADER.size
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise ParseError("truncated DPAT payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(shape)
    return arr.astype(dtype.newbyteorder("=")), end


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def save_container(path, tensors: dict) -> None:
    records = []
    index = {}
    offset = 0
    for name, arr in tensors.items():
        rec = encode_tensor(arr)
        index[name] = offset
        offset += len(rec)
        records.append(rec)
    head = json.dumps(index, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC + struct.pack("<I", len(head)) + head)
        for rec in records:
            fh.write(rec)


def load_container(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CONTAINER_MAGIC:
        raise ParseError(f"{path}: not a DPAC checkpoint")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        index = json.loads(buf[8: 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint index") from exc
    base = 8 + n
    return {name: decode_tensor(buf, base + off)[0] for name, off in index.items()}
