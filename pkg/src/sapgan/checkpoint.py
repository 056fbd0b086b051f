"""Single-file training snapshots.

Layout: an 8-byte magic, a little-endian u32 format version, a u64 header
length, a canonical JSON header, then every tensor's float32 data back to back
in little-endian order.  Tensor names are sorted and the JSON is canonicalized
(sorted keys, no whitespace), so saving, loading, and saving again reproduces
the file byte for byte; nothing time- or machine-dependent is written.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np
import torch
from torch import Tensor

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "peek_meta"]

MAGIC = b"SAPGCKPT"
VERSION = 1
_FIXED_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    """Unreadable or malformed checkpoint file."""


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, Tensor], meta: dict) -> None:
    """Write tensors and JSON-serializable metadata atomically."""
    index: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        data = arr.tobytes()
        index[name] = {"shape": list(t.shape), "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    header = _canonical_json({"tensors": index, "meta": meta})
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_FIXED_HEADER.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def _read_header(f) -> tuple[dict, int]:
    fixed = f.read(_FIXED_HEADER.size)
    if len(fixed) < _FIXED_HEADER.size:
        raise CheckpointError("file too short for the fixed header")
    magic, version, header_len = _FIXED_HEADER.unpack(fixed)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    raw = f.read(header_len)
    if len(raw) < header_len:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt header: {e}") from e
    if not isinstance(header, dict) or "tensors" not in header or "meta" not in header:
        raise CheckpointError("header is missing the tensors/meta sections")
    return header, _FIXED_HEADER.size + header_len


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint back; inverse of save_checkpoint."""
    with open(path, "rb") as f:
        header, payload_start = _read_header(f)
        payload = f.read()
    tensors: dict[str, Tensor] = {}
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[start : start + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(f"truncated payload for tensor '{name}'")
        arr = np.frombuffer(chunk, dtype="<f4").copy()
        expect = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expect:
            raise CheckpointError(
                f"tensor '{name}' holds {arr.size} values but shape {entry['shape']} needs {expect}"
            )
        tensors[name] = torch.from_numpy(arr).reshape(entry["shape"])
    return tensors, header["meta"]


def peek_meta(path: str | os.PathLike) -> dict:
    """Read only the metadata section, skipping tensor payloads."""
    with open(path, "rb") as f:
        header, _ = _read_header(f)
    return header["meta"]
