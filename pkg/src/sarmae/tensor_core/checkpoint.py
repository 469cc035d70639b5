"""SMAECKPT tensor container.

Layout (all integers little-endian)::

    0   8 bytes   magic  b"SMAECKPT"
    8   u32       format version (1)
    12  u64       manifest length M in bytes
    20  M bytes   UTF-8 JSON manifest:
                    {"metadata": {...},
                     "tensors": [{"name", "shape", "dtype": "f32",
                                  "offset", "nbytes"}, ...]}
    20+M          data section; each tensor is a raw little-endian f32
                  row-major buffer at ``offset`` bytes from the section start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SMAECKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    manifest = json.dumps({"metadata": dict(metadata or {}), "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for buf in blobs:
            fh.write(buf)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, metadata)``; tensors come back as float32 arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file is {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _HEADER.size + mlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: manifest truncated (need {start} bytes, have {len(raw)})")
    manifest = json.loads(raw[_HEADER.size : start].decode("utf-8"))
    tensors = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"{path}: tensor {entry['name']} has dtype {entry['dtype']}")
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: tensor {entry['name']} ends at byte {hi}, file has {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4, offset=lo)
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    return tensors, manifest["metadata"]
