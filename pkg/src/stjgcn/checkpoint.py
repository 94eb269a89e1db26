"""Single-file checkpoint: magic, JSON manifest, raw little-endian arrays.

Layout::

    b"STJGCN1"
    uint64 little-endian byte length of the manifest
    manifest (UTF-8 JSON, sorted keys)
    array payloads, concatenated in manifest (name-sorted) order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STJGCN1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<")


def encode(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, payloads = [], []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = _le_dtype(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str})
        payloads.append(arr.astype(dt, copy=False).tobytes())
    manifest = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _LEN.pack(len(manifest)) + manifest + b"".join(payloads)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: missing STJGCN1 magic")
    pos = len(MAGIC)
    if len(blob) < pos + _LEN.size:
        raise CheckpointError("truncated header")
    (size,) = _LEN.unpack_from(blob, pos)
    pos += _LEN.size
    try:
        manifest = json.loads(blob[pos:pos + size].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    pos += size
    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(entry["shape"]).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last array")
    return arrays, manifest["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(encode(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
