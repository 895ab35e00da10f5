"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DCSWCKPT" | u32 version | u32 meta_len | meta (UTF-8 JSON: config, norm stats)
    u32 n_records
    per record: u16 name_len | name | u8 ndim | u32 dims[ndim] | float32 data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"DCSWCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, state, meta):
    """Write ``state`` (ordered name -> array) and JSON-serializable ``meta``."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load(path):
    """Return ``(state, meta)``; ``state`` preserves record order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch (file corrupted)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack_from("<I", body, pos + 4)
    pos += 8
    meta = json.loads(body[pos:pos + mlen])
    pos += mlen
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    state = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    return state, meta


def load_into(model, state):
    """Copy ``state`` into ``model``; fails listing names present on only one side."""
    own = model.state_dict()
    diff = sorted(set(own) ^ set(state))
    if diff:
        raise CheckpointError(f"parameter names differ from model: {diff}")
    model.load_state_dict(state)
