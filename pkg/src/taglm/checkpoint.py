"""Versioned binary container of named float64 tensors.

Layout (little endian)::

    magic      8 bytes   b"TAGLMCKP"
    version    u32
    digest     32 bytes  sha256 of the metadata JSON
    meta_len   u32, then UTF-8 JSON (sorted keys, compact separators)
    count      u32
    per tensor: name_len u16, name, ndim u8, ndim x u64 dims, row-major <f8 data

Encoding is canonical, so reading a file and writing it back is byte-identical.
"""
import hashlib
import json
import struct

import numpy as np

from .errors import InputError

MAGIC = b"TAGLMCKP"
VERSION = 1


def _meta_bytes(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(meta, tensors):
    mb = _meta_bytes(meta)
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(mb).digest(),
             struct.pack("<I", len(mb)), mb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob):
    if blob[:8] != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise InputError(f"checkpoint version {version}, reader expects {VERSION}")
    digest = blob[12:44]
    (mlen,) = struct.unpack_from("<I", blob, 44)
    mb = blob[48:48 + mlen]
    if hashlib.sha256(mb).digest() != digest:
        raise InputError("checkpoint metadata digest mismatch")
    meta = json.loads(mb.decode("utf-8"))
    off = 48 + mlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(blob):
        raise InputError("trailing bytes after the last tensor")
    return meta, tensors


def save(path, meta, tensors):
    blob = encode(meta, tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def tensors_digest(tensors):
    """sha256 over names, shapes and bytes, independent of metadata."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
