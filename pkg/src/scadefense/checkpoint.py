"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"SCA1"
    u32 metadata length, UTF-8 JSON metadata (model spec plus free-form info)
    u32 record count
    per record: u32 name length, name bytes, u32 rank, u64 extents[rank],
                float64 payload in C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Model, ModelSpec

MAGIC = b"SCA1"


class CheckpointError(ValueError):
    pass


def dumps(model: Model, info: dict | None = None) -> bytes:
    meta = json.dumps({"spec": model.spec.to_dict(), "info": info or {}}, sort_keys=True).encode()
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(state))]
    for name, value in state.items():
        raw = name.encode()
        value = np.ascontiguousarray(value, dtype="<f8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", value.ndim),
                  struct.pack(f"<{value.ndim}Q", *value.shape), value.tobytes()]
    return b"".join(parts)


def loads(blob: bytes) -> tuple[Model, dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = blob[pos : pos + n]
        pos += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    model = Model(ModelSpec.from_dict(meta["spec"]))
    model.load_state_dict(state)
    return model, meta["info"]


def save(path, model: Model, info: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, info))


def load(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return loads(path.read_bytes())
