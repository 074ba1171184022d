"""Checkpoint container: versioned header, SHA-256 checksum, npz payload.

Layout (little-endian)::

    offset  size  field
    0       8     magic  b"HRTCKPT\\0"
    8       4     u32 format version
    12      32    sha256 of payload
    44      8     u64 payload length
    52      n     payload: numpy .npz archive; key "__meta__" holds UTF-8 JSON
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, VersionError

MAGIC = b"HRTCKPT\x00"
VERSION = 1
_HEAD = struct.Struct("<8sI32sQ")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    buf = io.BytesIO()
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True, default=_json_default).encode(), dtype=np.uint8)
    np.savez(buf, **payload)
    body = buf.getvalue()
    head = _HEAD.pack(MAGIC, VERSION, hashlib.sha256(body).digest(), len(body))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(head + body)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise ChecksumError(f"{path}: truncated header")
    magic, version, digest, n = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ChecksumError(f"{path}: bad magic")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    body = raw[_HEAD.size :]
    if len(body) != n or hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    with np.load(io.BytesIO(body), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta
