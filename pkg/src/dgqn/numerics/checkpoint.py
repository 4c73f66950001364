"""Single-file checkpoints: a JSON manifest followed by raw little-endian float64 payloads.

Layout::

    b"DGQNCKPT"  8-byte magic
    uint64 LE    manifest length in bytes
    manifest     UTF-8 JSON {"meta": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}
    payload      tensors back to back; offsets are relative to the payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DGQNCKPT"
DTYPE = "<f8"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": DTYPE,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    base = 16 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        chunk = raw[start:start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    return tensors, manifest["meta"]
