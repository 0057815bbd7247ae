"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"OMBRLCKP"
    version      u32       SCHEMA_VERSION
    n_sections   u32
    section * n_sections:
        name_len u16, name (utf-8)
        kind     u8        0 = JSON text, 1 = float64 array, 2 = int64 array
        ndim     u8
        shape    u64 * ndim
        nbytes   u64
        payload  nbytes    (arrays in C order, '<f8' / '<i8')
    crc32        u32       over every preceding byte

See docs/checkpoint_format.md for the section names written by the trainer.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"OMBRLCKP"
SCHEMA_VERSION = 1
_KIND_JSON, _KIND_F64, _KIND_I64 = 0, 1, 2


class CheckpointError(RuntimeError):
    pass


def encode(sections: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", SCHEMA_VERSION, len(sections))]
    for name, value in sections.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, np.ndarray):
            if np.issubdtype(value.dtype, np.integer) or value.dtype == bool:
                kind, data = _KIND_I64, np.ascontiguousarray(value, dtype="<i8")
            else:
                kind, data = _KIND_F64, np.ascontiguousarray(value, dtype="<f8")
            payload = data.tobytes()
            shape = data.shape
        else:
            kind, shape = _KIND_JSON, ()
            payload = json.dumps(value, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<BB", kind, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> dict:
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint is corrupt or truncated (CRC mismatch)")
    version, count = struct.unpack_from("<II", body, 8)
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema {version} is not supported (expected {SCHEMA_VERSION})")
    off, out = 16, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            kind, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, off)
            off += 8
            payload = body[off:off + nbytes]
            if len(payload) != nbytes:
                raise CheckpointError("section payload runs past end of file")
            off += nbytes
            if kind == _KIND_JSON:
                out[name] = json.loads(payload.decode("utf-8"))
            elif kind in (_KIND_F64, _KIND_I64):
                dt = "<f8" if kind == _KIND_F64 else "<i8"
                out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt[1:]).copy()
            else:
                raise CheckpointError(f"unknown section kind {kind}")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if off != len(body):
        raise CheckpointError("trailing bytes after last section")
    return out


def save(sections: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(sections))
    os.replace(tmp, path)
    return path


def load(path) -> dict:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(blob)
