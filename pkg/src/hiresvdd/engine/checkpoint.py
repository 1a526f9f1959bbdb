"""Flat binary checkpoint ("SBCK"): named float32 arrays, little-endian."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..errors import IoError, ParseError, UnsupportedFormat

MAGIC = b"SBCK"
VERSION = 1


def encode_checkpoint(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    try:
        magic, version, count = struct.unpack_from("<4sII", data, 0)
    except struct.error as exc:
        raise ParseError("truncated checkpoint header") from exc
    if magic != MAGIC:
        raise ParseError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise UnsupportedFormat(f"checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(data):
                raise ParseError(f"checkpoint truncated inside {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
            pos += 4 * n
    except struct.error as exc:
        raise ParseError("truncated checkpoint") from exc
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} trailing bytes after checkpoint")
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    blob = encode_checkpoint(arrays)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        return decode_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def arrays_digest(arrays: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode_checkpoint(arrays)).hexdigest()
