"""Checkpoint persistence with bit-exact round trips.

Layout: magic string, uint32 format version, uint32 spec length, the
architecture spec as JSON, a uint64 float count, the raw float32
little-endian parameter blob in declaration order (including batchnorm
running statistics), and a trailing 8-byte blake2b checksum over all
preceding bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .models import ArchitectureSpec, MultiExitModel, build_model

MAGIC = b"EXITNET1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save_checkpoint(model: MultiExitModel, path) -> None:
    spec_json = model.spec.to_json().encode()
    arrays = [arr for _, arr in model.state_arrays()]
    total = sum(a.size for a in arrays)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    payload = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(spec_json)) + spec_json
    payload += struct.pack("<Q", total) + blob
    with open(path, "wb") as f:
        f.write(payload + _checksum(payload))


def load_checkpoint(path) -> MultiExitModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 16:
        raise CheckpointError("truncated checkpoint file")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic; expected {MAGIC!r}")
    payload, digest = raw[:-8], raw[-8:]
    if _checksum(payload) != digest:
        raise CheckpointError("checksum mismatch; file corrupted")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}; expected {VERSION}")
    (spec_len,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    try:
        spec = ArchitectureSpec.from_json(payload[offset : offset + spec_len].decode())
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable architecture spec: {exc}") from exc
    offset += spec_len
    (total,) = struct.unpack_from("<Q", payload, offset)
    offset += 8
    if len(payload) - offset != total * 4:
        raise CheckpointError("parameter blob length mismatch")
    flat = np.frombuffer(payload, dtype="<f4", count=total, offset=offset)

    model = build_model(spec, seed=0)
    cursor = 0
    for _, arr in model.state_arrays():
        chunk = flat[cursor : cursor + arr.size]
        if chunk.size != arr.size:
            raise CheckpointError("parameter blob does not match architecture")
        arr[...] = chunk.reshape(arr.shape)
        cursor += arr.size
    if cursor != total:
        raise CheckpointError("parameter blob does not match architecture")
    return model
