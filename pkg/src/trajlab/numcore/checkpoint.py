"""Self-describing binary checkpoint container.

Layout: magic ``TLCP`` | u32 version | 64-byte config digest (hex ascii) |
u32 meta length + canonical-JSON meta | u32 blob count | per blob a name,
dtype tag, shape and raw array bytes | trailing u32 CRC32 of everything
before it. Round-trips are bit-exact: saving what ``load`` returned yields
an identical file.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"TLCP"
VERSION = 1


class CheckpointError(RuntimeError):
    """Bad magic, version mismatch or checksum failure."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, blobs: dict[str, np.ndarray], meta: dict, config_digest: str = "") -> None:
    """Write named arrays plus a JSON meta block; blobs are sorted by name."""
    digest = config_digest.ljust(64, " ")[:64].encode("ascii")
    parts = [MAGIC, struct.pack("<I", VERSION), digest]
    meta_bytes = _canonical_json(meta)
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    names = sorted(blobs)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(blobs[name])
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", len(dtype_b)))
        parts.append(dtype_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        raw = arr.tobytes()
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


def load_checkpoint(path):
    """Read a container; returns (blobs, meta, config_digest)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 + 64 + 4 + 4 + 4:
        raise CheckpointError("file too short to be a checkpoint")
    payload, crc_b = raw[:-4], raw[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_b)[0]:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    off = 0
    if payload[:4] != MAGIC:
        raise CheckpointError(f"bad magic {payload[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = payload[off : off + 64].decode("ascii").rstrip()
    off += 64
    (meta_len,) = struct.unpack_from("<I", payload, off)
    off += 4
    meta = json.loads(payload[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_blobs,) = struct.unpack_from("<I", payload, off)
    off += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off : off + name_len].decode("utf-8")
        off += name_len
        (dtype_len,) = struct.unpack_from("<B", payload, off)
        off += 1
        dtype = np.dtype(payload[off : off + dtype_len].decode("ascii"))
        off += dtype_len
        (ndim,) = struct.unpack_from("<B", payload, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, off) if ndim else ()
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", payload, off)
        off += 8
        arr = np.frombuffer(payload[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        blobs[name] = arr
    return blobs, meta, digest
