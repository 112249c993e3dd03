"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"ERPD" | u32 version | u32 json_len | json config (UTF-8)
    repeated: u16 name_len | name | u8 rank | u32 dim * rank | f32 payload

EMA shadow tensors are stored under the parameter name suffixed ``.ema``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore

MAGIC = b"ERPD"
VERSION = 1
EMA_SUFFIX = ".ema"


class CheckpointError(ValueError):
    pass


def _encode_entry(name: str, value: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    arr = np.ascontiguousarray(value, dtype="<f4")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps_checkpoint(config: dict, store: ParamStore) -> bytes:
    meta = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for name in store.names():
        parts.append(_encode_entry(name, store.raw[name]))
    for name in store.names():
        parts.append(_encode_entry(name + EMA_SUFFIX, store.ema[name]))
    return b"".join(parts)


def loads_checkpoint(blob: bytes) -> tuple[dict, ParamStore]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    if pos + meta_len > len(blob):
        raise CheckpointError("truncated checkpoint header")
    config = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    tensors: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    store = ParamStore()
    for name, value in tensors.items():
        if name.endswith(EMA_SUFFIX):
            continue
        store.raw[name] = value
        shadow = tensors.get(name + EMA_SUFFIX)
        if shadow is None:
            raise CheckpointError(f"missing EMA tensor for {name!r}")
        if shadow.shape != value.shape:
            raise CheckpointError(f"EMA tensor for {name!r} has shape {shadow.shape}, expected {value.shape}")
        store.ema[name] = shadow
    return config, store


def save_checkpoint(path, config: dict, store: ParamStore):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps_checkpoint(config, store))


def load_checkpoint(path) -> tuple[dict, ParamStore]:
    return loads_checkpoint(Path(path).read_bytes())
