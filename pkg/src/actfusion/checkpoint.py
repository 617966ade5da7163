"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"AFCKPT01"
    bytes 8..11   uint32 header length L
    next L bytes  UTF-8 JSON header (sorted keys, compact separators)
    rest          float64 '<f8' payload, records concatenated in header order

The header carries ``schema_version``, ``kind``, ``fingerprint`` (of the
model config), free-form ``meta`` and the ordered ``records`` list of
``{"name", "shape"}``. Writing what :func:`load` returned reproduces the
original file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"AFCKPT01"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def fingerprint(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dumps(state: Mapping[str, np.ndarray], kind: str, config: Any = None, meta: Any = None) -> bytes:
    records = []
    chunks = []
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config,
        "fingerprint": fingerprint(config),
        "meta": meta if meta is not None else {},
        "records": records,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {header.get('schema_version')}")
    pos = 12 + hlen
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for rec in header["records"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated payload at record {rec['name']!r}")
        state[rec["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after payload")
    return state, header


def save(path, state: Mapping[str, np.ndarray], kind: str, config: Any = None, meta: Any = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(state, kind, config, meta))


def load(path, kind: str | None = None, config: Any = None):
    """Read a checkpoint; with ``config`` given, reject a fingerprint mismatch."""
    state, header = loads(Path(path).read_bytes())
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    if config is not None and header["fingerprint"] != fingerprint(config):
        raise CheckpointError(
            f"{path}: config fingerprint {header['fingerprint']} does not match {fingerprint(config)}"
        )
    return state, header


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
