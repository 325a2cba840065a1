"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SEEA" | u32 version | u32 header_length | UTF-8 JSON header | tensor bytes

The header holds ``tensors`` (ordered list of ``{name, dtype, shape, trainable,
byte_offset, byte_length}``, offsets relative to the start of the tensor bytes)
and a free-form ``config`` snapshot.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .params import ParameterStore

MAGIC = b"SEEA"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def dumps(params: ParameterStore, config: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for p in params:
        arr = p.tensor.data
        name = arr.dtype.name
        if name not in _DTYPES:
            raise CheckpointError(f"{p.name}: unsupported dtype {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes()
        entries.append(
            {
                "name": p.name,
                "dtype": name,
                "shape": list(arr.shape),
                "trainable": p.trainable,
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "config": config or {}}, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[ParameterStore, dict]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"file too short for a checkpoint header ({len(blob)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"incompatible checkpoint version {version}; this build reads {VERSION}")
    start = _PREFIX.size + header_len
    if start > len(blob):
        raise CheckpointError(f"truncated checkpoint: header claims {header_len} bytes, file has {len(blob) - _PREFIX.size}")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        entries = header["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    data = memoryview(blob)[start:]
    expected = max((e["byte_offset"] + e["byte_length"] for e in entries), default=0)
    if expected != len(data):
        raise CheckpointError(f"checkpoint integrity error: header declares {expected} data bytes, found {len(data)}")
    store = ParameterStore()
    for e in entries:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise CheckpointError(f"{e['name']}: unsupported dtype {e['dtype']}")
        shape = tuple(e["shape"])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if n_bytes != e["byte_length"]:
            raise CheckpointError(f"{e['name']}: declared shape {list(shape)} needs {n_bytes} bytes, entry has {e['byte_length']}")
        raw = data[e["byte_offset"]:e["byte_offset"] + e["byte_length"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        store.add(e["name"], arr, trainable=e["trainable"], dtype=arr.dtype)
    return store, header.get("config", {})


def save_checkpoint(params: ParameterStore, path, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, config))
    return path


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    return loads(Path(path).read_bytes())


def restore_into(params: ParameterStore, loaded: ParameterStore) -> None:
    """Copy values from a loaded store into a model's store, checking names, shapes and flags."""
    problems = []
    for p in loaded:
        if p.name in params and params._entries[p.name].trainable != p.trainable:
            problems.append(f"{p.name}: trainable flag differs")
    if problems:
        raise CheckpointError("; ".join(problems))
    try:
        params.load_state_dict({p.name: p.tensor.data for p in loaded})
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not match model: {exc}") from exc
