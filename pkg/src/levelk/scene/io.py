"""Line-delimited JSON storage for scenarios.

One scenario per line. Arrays are stored as ``{"dtype", "shape", "data"}``
with ``data`` flattened; floats go through ``repr`` so values round-trip
exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .types import Frame, Scenario

FORMAT_VERSION = 1


class ScenarioFormatError(ValueError):
    pass


def _encode_array(a: np.ndarray) -> dict:
    if a.dtype == bool:
        data = a.astype(np.uint8).ravel().tolist()
    else:
        data = a.astype(np.float64).ravel().tolist()
    return {"dtype": a.dtype.str, "shape": list(a.shape), "data": data}


def _decode_array(obj: dict, name: str) -> np.ndarray:
    try:
        dtype = np.dtype(obj["dtype"])
        arr = np.asarray(obj["data"], dtype=np.float64 if dtype.kind == "f" else np.uint8)
        return arr.astype(dtype).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"field {name!r}: malformed array ({exc})") from exc


def to_record(scn: Scenario) -> dict:
    rec = {"format_version": FORMAT_VERSION}
    for f in dataclasses.fields(scn):
        val = getattr(scn, f.name)
        if isinstance(val, np.ndarray):
            rec[f.name] = _encode_array(val)
        elif isinstance(val, Frame):
            rec[f.name] = [val.x, val.y, val.heading]
        else:
            rec[f.name] = val
    return rec


def from_record(rec: dict) -> Scenario:
    version = rec.get("format_version")
    if version != FORMAT_VERSION:
        raise ScenarioFormatError(f"unsupported scenario format_version {version!r} (expected {FORMAT_VERSION})")
    kwargs = {}
    for f in dataclasses.fields(Scenario):
        if f.name not in rec:
            raise ScenarioFormatError(f"missing field {f.name!r}")
        val = rec[f.name]
        if isinstance(val, dict) and "dtype" in val:
            val = _decode_array(val, f.name)
        elif f.name == "frame":
            val = Frame(*map(float, val))
        kwargs[f.name] = val
    return Scenario(**kwargs)


def serialize(scn: Scenario) -> bytes:
    return json.dumps(to_record(scn), separators=(",", ":"), sort_keys=True).encode()


def deserialize(blob: bytes) -> Scenario:
    if not blob or not blob.strip():
        raise ScenarioFormatError("empty input: no scenario record at byte 0")
    try:
        rec = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"corrupt or truncated record at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(rec, dict):
        raise ScenarioFormatError("record is not an object at byte 0")
    return from_record(rec)


def content_hash(scenarios: Iterable[Scenario]) -> str:
    h = hashlib.sha256()
    for scn in scenarios:
        h.update(serialize(scn))
        h.update(b"\n")
    return h.hexdigest()


def write_corpus(path, scenarios: Iterable[Scenario]) -> None:
    with open(path, "wb") as fh:
        for scn in scenarios:
            fh.write(serialize(scn) + b"\n")


def read_corpus(path) -> list[Scenario]:
    out = []
    offset = 0
    for lineno, line in enumerate(Path(path).read_bytes().splitlines(keepends=True), 1):
        if line.strip():
            try:
                out.append(deserialize(line))
            except ScenarioFormatError as exc:
                raise ScenarioFormatError(f"{path}: line {lineno} (byte {offset}): {exc}") from exc
        offset += len(line)
    return out
