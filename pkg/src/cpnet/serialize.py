"""Binary container for named arrays plus a small text metadata block.

Layout (all integers little-endian)::

    magic      4 bytes   b"CPNT"
    version    u32       1
    meta_len   u32       length of the metadata block in bytes
    meta       bytes     UTF-8 "key=value" lines
    count      u32       number of arrays
    repeated count times:
        name_len  u16
        name      bytes  UTF-8
        dtype     u8     0 = float32, 1 = float64, 2 = int64
        ndim      u8
        dims      u64 * ndim
        data      row-major values, little-endian

Model checkpoints store parameter arrays under their layer names and the
model/config description in the metadata block.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPNT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class FormatError(ValueError):
    pass


def encode_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot contain '=' in the key or newlines")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode()


def decode_meta(raw: bytes) -> dict[str, str]:
    meta = {}
    for line in raw.decode().splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return meta


def dumps(arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    meta_raw = encode_meta(meta or {})
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(buf)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("not a CPNT file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise FormatError("truncated file")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated file")
        pos += n
        return bytes(view[pos - n : pos])

    version, meta_len = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    meta = decode_meta(take_bytes(meta_len))
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = take_bytes(nlen).decode()
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise FormatError(f"array {name!r}: unknown dtype code {code}")
        shape = take(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(view):
            raise FormatError(f"array {name!r}: truncated data")
        arr = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(shape)
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes")
    return arrays, meta


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
