"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"ISEGCKPT"
    version    u32
    hash       32 bytes  SHA-256 of the canonical model-config JSON
    n_sections u32
    section*   name_len u16 | name utf-8 | kind u8 | payload

    kind 0 (float64 array): ndim u8 | dims u32 * ndim | data <f8 (C order)
    kind 1 (JSON):          length u32 | utf-8 bytes
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

MAGIC = b"ISEGCKPT"
VERSION = 1
_ARRAY, _JSON = 0, 1


def config_hash(config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def write_checkpoint(path: str | Path, digest: bytes, arrays: dict[str, np.ndarray],
                     meta: dict[str, Any]) -> None:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += digest
    out += struct.pack("<I", len(arrays) + len(meta))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key + struct.pack("<B", _ARRAY)
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    for name, value in meta.items():
        key = name.encode()
        blob = json.dumps(value, sort_keys=True).encode()
        out += struct.pack("<H", len(key)) + key + struct.pack("<B", _JSON)
        out += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path: str | Path) -> tuple[bytes, dict[str, np.ndarray], dict[str, Any]]:
    """Returns ``(config digest, arrays, meta)``."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    digest = buf[12:44]
    (count,) = struct.unpack_from("<I", buf, 44)
    pos = 48
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + klen].decode()
            pos += klen
            kind = buf[pos]
            pos += 1
            if kind == _ARRAY:
                ndim = buf[pos]
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", buf, pos)
                pos += 4 * ndim
                n = int(np.prod(shape, dtype=np.int64))
                arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
                pos += 8 * n
            elif kind == _JSON:
                (blen,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                meta[name] = json.loads(buf[pos:pos + blen].decode())
                pos += blen
            else:
                raise DataError(f"unknown section kind {kind} in {path}")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"truncated or corrupt checkpoint {path}: {exc}") from exc
    return digest, arrays, meta
