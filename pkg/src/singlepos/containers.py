"""Versioned flat container of named arrays.

Byte layout (all integers little-endian)::

    magic      4 bytes   b"SPAC"
    version    uint32    currently 1
    count      uint32    number of arrays
    then, per array:
      name_len uint16, name (utf-8, name_len bytes)
      dtype    4 bytes   ascii numpy type code padded with spaces, e.g. b"f4  "
      ndim     uint8
      shape    ndim x uint64
      nbytes   uint64
      data     nbytes raw little-endian values, row-major

A single optional ``__meta__`` entry holds a utf-8 JSON document stored as a
``u1`` array; :func:`save` / :func:`load` handle it transparently.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPAC"
VERSION = 1
_DTYPES = {"f2", "f4", "f8", "i1", "i2", "i4", "i8", "u1", "u2", "u4", "u8", "b1"}
META_KEY = "__meta__"


class ContainerError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = dict(arrays)
    if meta is not None:
        items[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr)  # tobytes() is row-major; ascontiguousarray would turn 0-d into 1-d
        code = arr.dtype.kind + str(arr.dtype.itemsize)
        if code not in _DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        bname = name.encode()
        chunks.append(struct.pack("<H", len(bname)) + bname)
        chunks.append(code.ljust(4).encode())
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if buf[:4] != MAGIC:
        raise ContainerError("not an array container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 12
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            code = buf[off:off + 4].decode().strip()
            off += 4
            if code not in _DTYPES:
                raise ContainerError(f"unknown dtype code {code!r} for {name!r}")
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", buf, off)
            off += 8
            dt = np.dtype("?" if code == "b1" else code).newbyteorder("<")
            data = buf[off:off + nbytes]
            if len(data) != nbytes:
                raise ContainerError(f"truncated data for {name!r}")
            off += nbytes
            arrays[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    meta = None
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    return arrays, meta


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    tmp.replace(path)


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such container: {path}")
    return loads(path.read_bytes())
