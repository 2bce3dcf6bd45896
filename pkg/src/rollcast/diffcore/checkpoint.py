"""Versioned binary container for named parameter tensors.

Layout (all little-endian):
    magic   4 bytes  b"RCKP"
    u16     version (=1)
    u32     tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   ndim, then ndim x u32 dims
        f32  payload, C order
    u32     CRC32 of every preceding byte

Payloads are stored as float32; a write/read round-trip restores the float32
bits exactly. Loading returns float64 arrays upcast from those bits.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RCKP"
VERSION = 1


class CheckpointError(IOError):
    """Malformed or corrupt checkpoint file."""


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]):
    """Write named arrays (cast to float32) to a checksummed container."""
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    blob = b"".join(chunks)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> dict:
    """Read a container back into {name: float64 array}; validates the checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < 14:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r} at offset 0")
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"checksum mismatch: stored {stored:#x}, computed {actual:#x}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    end = len(blob) - 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            nbytes = 4 * size
            if off + nbytes > end:
                raise CheckpointError(f"payload for {name!r} truncated at offset {off}")
            payload = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
            off += nbytes
        except struct.error as exc:
            raise CheckpointError(f"corrupt tensor record at offset {off}: {exc}") from exc
        out[name] = payload.astype(np.float64)
    if off != end:
        raise CheckpointError(f"trailing bytes after tensor records at offset {off}")
    return out
