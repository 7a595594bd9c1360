"""Binary snapshot format for :class:`NetworkParams`.

Layout (all integers little-endian)::

    magic      4 bytes  b"AETS"
    version    u16
    side       u8       0 = cat, 1 = mouse
    arena hash 16 bytes ASCII hex (shape key of the arena config)
    step       u64
    meta len   u32, then UTF-8 JSON (net config, input dims, extra metadata)
    n blocks   u32
    per block: name len u16, name UTF-8, dtype u8 (0 f32, 1 f64), ndim u8,
               dims u32 * ndim, raw little-endian values
    crc32      u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import engine as E
from .model import InputDims, NetConfig, NetworkParams

MAGIC = b"AETS"
VERSION = 1
_SIDES = ("cat", "mouse")
_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


class SnapshotError(ValueError):
    pass


def serialize(p: NetworkParams) -> bytes:
    meta = json.dumps({"net": p.net.to_dict(), "dims": vars(p.dims), "meta": p.meta},
                      sort_keys=True).encode()
    ahash = (p.arena_hash or "").encode("ascii").ljust(16, b"0")[:16]
    out = [MAGIC, struct.pack("<HB", VERSION, _SIDES.index(p.side)), ahash,
           struct.pack("<Q", p.step), struct.pack("<I", len(meta)), meta,
           struct.pack("<I", len(p.tensors))]
    for name, t in p.tensors.items():
        arr = t.data
        code = 0 if arr.dtype == np.float32 else 1
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(blob: bytes, expected_arena_hash: str | None = None) -> NetworkParams:
    if len(blob) < 4 + 3 + 16 + 8 + 4 + 4 or blob[:4] != MAGIC:
        raise SnapshotError("not a snapshot (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise SnapshotError("checksum mismatch (corrupt or tampered snapshot)")
    off = 4
    version, side_code = struct.unpack_from("<HB", body, off)
    off += 3
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    if side_code >= len(_SIDES):
        raise SnapshotError(f"bad side tag {side_code}")
    ahash = body[off:off + 16].decode("ascii")
    off += 16
    if expected_arena_hash is not None and ahash != expected_arena_hash:
        raise SnapshotError(f"arena hash mismatch: snapshot {ahash}, expected {expected_arena_hash}")
    (step,) = struct.unpack_from("<Q", body, off)
    off += 8
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + mlen].decode())
    off += mlen
    (nblocks,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(nblocks):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += n
        tensors[name] = E.parameter(arr.astype(dt.newbyteorder("="), copy=True), name=name)
    if off != len(body):
        raise SnapshotError("trailing bytes in snapshot")
    return NetworkParams(_SIDES[side_code], NetConfig.from_dict(meta["net"]),
                         InputDims(**meta["dims"]), tensors, ahash, step, meta.get("meta", {}))


def save(p: NetworkParams, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(serialize(p))
    tmp.replace(path)
    return path


def load(path, expected_arena_hash: str | None = None) -> NetworkParams:
    return deserialize(Path(path).read_bytes(), expected_arena_hash)
