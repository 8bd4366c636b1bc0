"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"JCARCKPT"            magic
    u32 version            currently 1
    u32 n, n bytes         metadata, JSON with sorted keys
    u32 groups
    per group: u16 name length, name (utf-8), u8 ndim, ndim x u32 dims
    per group, in manifest order: raw float32 data (<f4, C order)
"""
import hashlib
import io
import json
import struct

import numpy as np

MAGIC = b"JCARCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(meta, groups):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    m = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(m)))
    buf.write(m)
    buf.write(struct.pack("<I", len(groups)))
    for name, arr in groups.items():
        nb = name.encode()
        buf.write(struct.pack("<HB", len(nb), arr.ndim))
        buf.write(nb)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in groups.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data):
    """Inverse of ``dumps``: returns (meta, groups) with float32 arrays."""
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = take("<I")
    meta = json.loads(data[pos:pos + mlen].decode())
    pos += mlen
    (count,) = take("<I")
    manifest = []
    for _ in range(count):
        nlen, ndim = take("<HB")
        name = data[pos:pos + nlen].decode()
        pos += nlen
        manifest.append((name, take(f"<{ndim}I")))
    groups = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) * 4
        if pos + n > len(data):
            raise CheckpointError(f"truncated data for group {name!r}")
        groups[name] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=pos) \
            .reshape(shape).astype(np.float32)
        pos += n
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint data")
    return meta, groups


def save(path, meta, groups):
    data = dumps(meta, groups)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
