"""Single-file checkpoint format with a checksummed float32 payload.

Layout: 12-byte magic, little-endian uint64 header length, UTF-8 JSON header
(sorted keys) holding the config, the entry manifest (name, shape, offset,
nbytes), and the payload SHA-256, followed by the raw payload: each array as
row-major little-endian float32. Save -> load -> save reproduces identical
bytes for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError

MAGIC = b"DCAUNETCKPT1"


def save_checkpoint(path, config: dict, arrays: dict) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(arr32.shape),
            "offset": offset,
            "nbytes": arr32.nbytes,
        })
        chunks.append(arr32.tobytes())
        offset += arr32.nbytes
    payload = b"".join(chunks)
    header = {
        "format_version": 1,
        "config": config,
        "entries": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<Q", len(blob)))
        handle.write(blob)
        handle.write(payload)


def load_checkpoint(path):
    """Return (config, {name: float32 array}); raises FileFormatError on damage."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise FileFormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 8:
        raise FileFormatError(f"{path}: truncated header")
    (length,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: unreadable header ({exc})") from exc
    payload = data[start + length:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise FileFormatError(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in header["entries"]:
        begin, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[begin:begin + nbytes]
        if len(chunk) != nbytes:
            raise FileFormatError(f"{path}: entry {entry['name']} out of bounds")
        arrays[entry["name"]] = (
            np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        )
    return header["config"], arrays
