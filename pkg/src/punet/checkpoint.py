"""Self-describing binary container for named arrays.

Layout (all integers little-endian)::

    magic    8 bytes  b"PUNETCK1"
    version  u32
    count    u32
    metalen  u32, followed by metalen bytes of UTF-8 JSON
    count x entry:
        namelen u16, name (UTF-8)
        dtype   4 bytes ASCII, numpy dtype string such as "<f8", space padded
        ndim    u8, then ndim x u64 extents
        offset  u64  (from the start of the data section)
        nbytes  u64
    data section: raw little-endian values, entries back to back
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PUNETCK1"
VERSION = 1
_ALLOWED = {"<f8", "<f4", "<i8", "<i4", "|u1", "|b1"}


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = le.dtype.str
        if code not in _ALLOWED:
            raise CheckpointError(f"unsupported dtype {code} for {name!r}")
        raw = np.ascontiguousarray(le).tobytes()
        entries.append((name, code, arr.shape, offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)
    metab = json.dumps(meta or {}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<III", VERSION, len(entries), len(metab)), metab]
    for name, code, shape, off, n in entries:
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(code.ljust(4).encode())
        out.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape))
        out.append(struct.pack("<QQ", off, n))
    out.extend(blobs)
    Path(path).write_bytes(b"".join(out))


def load_arrays(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)`` from a container written by ``save_arrays``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic header")
    version, count, metalen = struct.unpack_from("<III", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 20
    meta = json.loads(buf[pos:pos + metalen].decode())
    pos += metalen
    table = []
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nl].decode()
        pos += nl
        code = buf[pos:pos + 4].decode().strip()
        pos += 4
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        off, n = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        table.append((name, code, shape, off, n))
    arrays = {}
    for name, code, shape, off, n in table:
        start = pos + off
        arr = np.frombuffer(buf[start:start + n], dtype=np.dtype(code)).reshape(shape)
        arrays[name] = arr.copy()
    return arrays, meta
