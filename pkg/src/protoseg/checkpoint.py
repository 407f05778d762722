"""``PSEG1`` checkpoint files.

Layout (little endian)::

    b"PSEG1"  u32 entry_count
    per entry: u16 name_len, name (utf-8), u8 dtype code, u8 ndim, u32 dims..., raw data
    32-byte sha256 of everything above

Entries are written in sorted name order so equal states give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSEG1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in "iub" and arr.dtype != np.uint8:
        return 1
    return 2


def dumps(entries: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = {k: np.asarray(v) for k, v in entries.items()}
    if meta is not None:
        items["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(items))
    for name in sorted(items):
        arr = items[name]
        code = _code(arr)
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    return bytes(buf)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(blob) < len(MAGIC) + 4 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a PSEG1 checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    try:
        pos = len(MAGIC)
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode()
            pos += n
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    meta_raw = out.pop("__meta__", None)
    meta = json.loads(meta_raw.tobytes().decode()) if meta_raw is not None else None
    return out, meta


def save(path: str | Path, entries: dict[str, np.ndarray], meta: dict | None = None) -> str:
    blob = dumps(entries, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None]:
    return loads(Path(path).read_bytes())


def file_digest(path: str | Path) -> str:
    """sha256 hex digest of a file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
