"""Single-file named-tensor container.

Layout::

    b"PNLF" | u32 little-endian header length | UTF-8 JSON header | blob

The header lists every tensor with its shape, byte offset into the blob and a
CRC32 of its bytes; the blob is the concatenated little-endian float32 data.
Everything else in the header (config snapshot, step count, adapter-only
flag, vocabulary...) is free-form metadata returned by :func:`load_checkpoint`.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .core import IntegrityError

MAGIC = b"PNLF"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_checkpoint(tensors: dict, meta: dict, path) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        arr = getattr(arr, "data", arr)
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(np.shape(arr)),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "adapter_only": bool(meta.get("adapter_only", False)),
        "step": int(meta.get("step", 0)),
        **{k: v for k, v in meta.items() if k not in ("adapter_only", "step")},
        "blob_bytes": offset,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IntegrityError(f"{path}: truncated preamble at offset {len(raw)}")
    if raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: bad magic at offset 0")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise IntegrityError(f"{path}: header truncated at offset {len(raw)} (needs {8 + hlen})")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header at offset 8: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported format version {header.get('version')!r}")
    blob = raw[8 + hlen :]
    base = 8 + hlen
    expect = 0
    tensors = {}
    for e in sorted(header["tensors"], key=lambda e: e["offset"]):
        off, n = e["offset"], e["nbytes"]
        if off != expect:
            raise IntegrityError(f"{path}: tensor {e['name']!r} offset {base + off} leaves a gap or overlap")
        if n != 4 * int(np.prod(e["shape"], dtype=np.int64)):
            raise IntegrityError(f"{path}: tensor {e['name']!r} size mismatch at offset {base + off}")
        if off + n > len(blob):
            raise IntegrityError(f"{path}: blob truncated, tensor {e['name']!r} at offset {base + off}")
        chunk = blob[off : off + n]
        if zlib.crc32(chunk) != e["crc32"]:
            raise IntegrityError(f"{path}: checksum mismatch for {e['name']!r} at offset {base + off}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype=_LE_F32).astype(np.float32).reshape(e["shape"])
        expect = off + n
    if expect != len(blob) or expect != header["blob_bytes"]:
        raise IntegrityError(f"{path}: trailing or missing blob bytes at offset {base + expect}")
    meta = {k: v for k, v in header.items() if k not in ("tensors", "blob_bytes")}
    return tensors, meta
