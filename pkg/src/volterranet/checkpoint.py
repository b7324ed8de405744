"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"VOLT1"  u16 version
    u32 metadata length, metadata as UTF-8 JSON (sorted keys)
    u32 tensor count, then per tensor:
        u16 name length, name (UTF-8), 2-byte dtype tag, u8 ndim,
        ndim x u64 dims, raw little-endian data

Tensors are written in the order given, so save -> load -> save reproduces the
file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"VOLT1"
VERSION = 1
_TAGS = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _tag(arr: np.ndarray) -> str:
    for tag, dt in _TAGS.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + tag.encode() + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:5] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, mlen = struct.unpack_from("<HI", raw, 5)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 11
        meta = json.loads(raw[pos : pos + mlen].decode())
        pos += mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + klen].decode()
            pos += klen
            tag = raw[pos : pos + 2].decode()
            (ndim,) = struct.unpack_from("<B", raw, pos + 2)
            pos += 3
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            dt = _TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise CheckpointError(f"tensor {name!r} truncated")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return meta, tensors


def atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, dumps(meta, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
