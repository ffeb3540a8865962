"""Binary checkpoint container shared by every model kind.

Layout (little-endian)::

    b"UVCK" | u16 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    u32 n_blocks | n_blocks x (u16 name_len | name | u8 ndim | ndim x u32 | f32 data)
"""
from __future__ import annotations

import io
import json
import os
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"UVCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(header: dict, params: "dict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, head_len = struct.unpack_from("<HI", view, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    off = 10
    header = json.loads(bytes(view[off:off + head_len]).decode("utf-8"))
    off += head_len
    (n,) = struct.unpack_from("<I", view, off)
    off += 4
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = arr.astype(np.float32)
    if off != len(blob):
        raise CheckpointError("trailing bytes after parameter blocks")
    return header, params


def save(path: str | os.PathLike, header: dict, params) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(header, params))


def load(path: str | os.PathLike) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        return loads(fh.read())
