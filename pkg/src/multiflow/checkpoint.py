"""Binary checkpoint format.

Layout (all multi-byte integers little-endian):

    magic   "MM2G"
    u32     format version (1)
    u32     modality count
            per modality: u32 name length, utf-8 name, u32 x3 latent shape,
            u32 context_len, u32 embed_dim
    u32     parameter count (entries sorted by name)
            per parameter: u32 name length, utf-8 name, u32 ndim, u32 x ndim
            dims, u8 dtype tag (0 = float32), u64 byte offset into payload
    u64     payload byte count
    bytes   float32 little-endian payload
    u32     CRC32 of everything above

Saving is order-independent (parameters sorted by name), so save -> load ->
save reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"MM2G"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(path, registry: list, params: dict) -> None:
    """registry: list of dicts with name / latent_shape / context_len /
    embed_dim; params: mapping name -> array-like (stored as float32)."""
    names = sorted(params)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")

    head = bytearray()
    head += MAGIC
    head += struct.pack("<I", VERSION)
    head += struct.pack("<I", len(registry))
    for m in registry:
        head += _pack_str(m["name"])
        head += struct.pack("<III", *(int(x) for x in m["latent_shape"]))
        head += struct.pack("<II", int(m["context_len"]), int(m["embed_dim"]))

    payload = bytearray()
    head += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f4"))
        head += _pack_str(name)
        head += struct.pack("<I", arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        head += struct.pack("<B", 0)
        head += struct.pack("<Q", len(payload))
        payload += arr.tobytes()

    blob = bytes(head) + struct.pack("<Q", len(payload)) + bytes(payload)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(blob + struct.pack("<I", crc))


def load_checkpoint(path):
    """Returns (registry, params) with float32 numpy arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise CheckpointError("truncated checkpoint file")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, not a checkpoint file")
    body, tail = blob[:-4], blob[-4:]
    if len(tail) != 4 or (zlib.crc32(body) & 0xFFFFFFFF) != struct.unpack("<I", tail)[0]:
        raise CheckpointError("CRC mismatch: checkpoint payload corrupted")

    r = _Reader(body)
    r.take(4)  # magic
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    registry = []
    for _ in range(r.u32()):
        name = r.string()
        shape = struct.unpack("<III", r.take(12))
        context_len = r.u32()
        embed_dim = r.u32()
        registry.append({"name": name, "latent_shape": shape,
                         "context_len": context_len, "embed_dim": embed_dim})

    entries = []
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        tag = r.u8()
        if tag != 0:
            raise CheckpointError(f"unknown dtype tag {tag}")
        offset = r.u64()
        entries.append((name, shape, offset))

    payload_len = r.u64()
    payload = r.take(payload_len)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after payload")

    params = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > payload_len:
            raise CheckpointError(f"parameter {name} overruns payload")
        arr = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape)
        params[name] = arr.copy()
    return registry, params
