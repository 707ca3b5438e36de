"""Self-describing parameter container.

Layout::

    b"LVKCKPT\\0"                 8-byte magic
    uint32 LE                     header length in bytes
    header (UTF-8 JSON)           {"format_version", "precision", "entries", "meta"}
    payload                       concatenated little-endian arrays

Each entry is ``{"name", "shape", "dtype", "offset", "nbytes"}``; offsets are
relative to the payload start.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LVKCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def shape_signature(arrays: dict[str, np.ndarray]) -> str:
    """Hash of parameter names and shapes, used to detect config/checkpoint mismatch."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(f"{name}:{tuple(np.shape(arrays[name]))};".encode())
    return h.hexdigest()[:16]


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None, precision: str | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        elif arr.dtype.kind in "iub":
            le = arr.astype(arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype, copy=False)
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    if precision is None:
        floats = [np.asarray(a).dtype for a in arrays.values() if np.asarray(a).dtype.kind == "f"]
        precision = str(floats[0]) if floats else "float32"
    header = {"format_version": FORMAT_VERSION, "precision": precision, "entries": entries,
              "meta": meta or {}, "signature": shape_signature(arrays)}
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a checkpoint; returns (arrays, header)."""
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointError(f"truncated checkpoint at byte {len(blob)}: header incomplete")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic at byte 0")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise CheckpointError(f"truncated checkpoint at byte {len(blob)}: header needs {start + hlen}")
    header = json.loads(blob[start:start + hlen].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {header.get('format_version')}")
    payload = memoryview(blob)[start + hlen:]
    arrays = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"truncated payload for {e['name']} at byte {start + hlen + len(payload)}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, header


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None, precision: str | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta, precision))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
