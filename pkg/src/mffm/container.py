"""Binary array container: named little-endian arrays plus a metadata text block.

Layout::

    b"MFFM" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u8 dtype code | u32 ndim | u32 dims... | raw data )
    u32 meta_len | metadata utf-8

Dtype codes: 0 = float32, 1 = float64, 2 = uint8. All integers are
little-endian.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MFFM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_KIND_CODES = {(dt.kind, dt.itemsize): code for code, dt in _DTYPES.items()}


class ContainerFormatError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_container(arrays, metadata: str = "") -> bytes:
    """Serialize ``arrays`` (mapping or list of ``(name, array)`` pairs)."""
    items = list(arrays.items()) if hasattr(arrays, "items") else list(arrays)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ContainerFormatError(f"duplicate entry names: {dup}")
    out = [MAGIC, _u32(VERSION), _u32(len(items))]
    for name, arr in items:
        a = np.asarray(arr)
        code = _KIND_CODES.get((a.dtype.kind, a.dtype.itemsize))
        if code is None:
            raise ContainerFormatError(f"{name}: unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        out += [_u32(len(raw)), raw, bytes([code]), _u32(a.ndim)]
        out += [_u32(d) for d in a.shape]
        out.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    meta = metadata.encode("utf-8")
    out += [_u32(len(meta)), meta]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerFormatError(f"truncated container: need {n} bytes at offset {self.pos}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_container(buf: bytes):
    """Inverse of :func:`encode_container`; returns ``(dict of arrays, metadata)``."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ContainerFormatError("bad magic: not an MFFM container")
    version = r.u32()
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        code = r.take(1)[0]
        if code not in _DTYPES:
            raise ContainerFormatError(f"{name}: unknown dtype code {code}")
        shape = tuple(r.u32() for _ in range(r.u32()))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if name in arrays:
            raise ContainerFormatError(f"duplicate entry name {name!r}")
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
    meta = r.take(r.u32()).decode("utf-8")
    if r.pos != len(buf):
        raise ContainerFormatError(f"{len(buf) - r.pos} trailing bytes after metadata")
    return arrays, meta


def save_container(path, arrays, metadata: str = "") -> None:
    """Write atomically (temporary file + rename)."""
    path = Path(path)
    data = encode_container(arrays, metadata)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_container(path):
    return decode_container(Path(path).read_bytes())
