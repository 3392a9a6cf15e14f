"""Binary artifact container shared by checkpoints and trajectory caches.

Layout::

    b"CDEQBLOB"                 8-byte magic
    uint64 little-endian        length of the JSON header in bytes
    JSON header (utf-8)         {"kind", "version", "sha256", "payload_bytes", "meta": {...}}
    payload                     raw little-endian float64 data

The checksum covers the payload; a mismatch aborts the load before anything
is decoded.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import CacheError, ValidationError

MAGIC = b"CDEQBLOB"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def pack_arrays(arrays):
    """Concatenate named arrays; returns (layout, payload bytes)."""
    layout, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F64)
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return layout, b"".join(chunks)


def unpack_arrays(layout, payload):
    flat = np.frombuffer(payload, dtype=_LE_F64)
    out = {}
    for entry in layout:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + n > flat.size:
            raise CacheError(f"array {entry['name']!r} runs past the payload")
        out[entry["name"]] = flat[start:start + n].reshape(entry["shape"]).astype(np.float64)
    return out


def write_artifact(path, kind, meta, payload):
    header = {
        "kind": kind,
        "version": VERSION,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
        "meta": meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CacheError(f"cannot write {path}: {exc}") from exc


def read_artifact(path, kind):
    """Return ``(meta, payload)`` after validating magic, kind, version and checksum."""
    if not os.path.exists(path):
        raise ValidationError(f"no such file: {path}")
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CacheError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CacheError(f"{path} is not a cdeq artifact")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheError(f"{path}: unreadable header") from exc
    if header.get("kind") != kind:
        raise CacheError(f"{path}: expected a {kind!r} artifact, found {header.get('kind')!r}")
    if header.get("version") != VERSION:
        raise CacheError(f"{path}: unsupported version {header.get('version')}")
    payload = blob[16 + hlen:]
    if len(payload) != header.get("payload_bytes") or hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CacheError(f"{path}: checksum mismatch")
    return header["meta"], payload
