"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LSLU"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (utf-8), u8 dtype code, u8 rank,
                rank x u32 extents, raw little-endian values

Training metadata travels as a uint8 tensor named ``__meta__`` holding
canonical (sorted-key) JSON, so the whole file stays one uniform record list.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, VersionMismatch

MAGIC = b"LSLU"
VERSION = 1
META_KEY = "__meta__"

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def encode(tensors: dict, meta: dict) -> bytes:
    items = list(tensors.items())
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    items.append((META_KEY, np.frombuffer(meta_bytes, dtype=np.uint8)))
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dtype not in DTYPE_CODES:
            if np.issubdtype(arr.dtype, np.integer):
                dtype = np.dtype("<i8")
            else:
                raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        name_b = name.encode()
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BB", DTYPE_CODES[dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(raw: bytes) -> Checkpoint:
    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptCheckpoint("checkpoint is truncated")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise CorruptCheckpoint("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    tensors, meta = {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode()
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint("tensor name is not valid utf-8") from exc
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise CorruptCheckpoint(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = CODE_DTYPES[code]
        nbytes = int(np.prod(dims)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims).copy()
        if name == META_KEY:
            try:
                meta = json.loads(arr.tobytes().decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CorruptCheckpoint("metadata block is not valid JSON") from exc
        else:
            tensors[name] = arr
    if pos != len(raw):
        raise CorruptCheckpoint(f"{len(raw) - pos} trailing bytes after the last tensor")
    return Checkpoint(tensors, meta, version)


def save_checkpoint(path, tensors: dict, meta: dict) -> bytes:
    raw = encode(tensors, meta)
    Path(path).write_bytes(raw)
    return raw


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_graph(path, graph, meta: dict) -> bytes:
    """Write every parameter and buffer of ``graph`` plus ``meta``."""
    return save_checkpoint(path, graph.state_dict(), meta)


def load_into_graph(ckpt: Checkpoint, graph) -> None:
    """Copy checkpoint tensors into ``graph``; shape errors name the offending tensor."""
    graph.load_state_dict(ckpt.tensors)
