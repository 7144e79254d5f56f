"""A3DC checkpoint container.

Layout (all integers little endian)::

    b"A3DC"
    u32  format version
    u64  config length, then that many bytes of UTF-8 JSON
    u32  tensor count
    per tensor:
        u16 name length, name bytes (UTF-8)
        u8  rank, rank x u64 extents
        row-major float32 payload

Tensors are written as float32 whatever their in-memory dtype.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ClipIOError, ConfigError

MAGIC = b"A3DC"
FORMAT_VERSION = 1


def _read_exact(f: BinaryIO, n: int, path) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ClipIOError(f"{path}: truncated checkpoint")
    return buf


def save_checkpoint(path, config: dict, tensors: dict) -> None:
    """Write atomically (temp file + rename) so an interrupted run never leaves half a file."""
    path = Path(path)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors.items():
                raw = name.encode("utf-8")
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except OSError as e:
        raise ClipIOError(f"{path}: cannot write checkpoint ({e})") from e


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``(config, tensors)``; tensors come back as float32 arrays in file order."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            if _read_exact(f, 4, path) != MAGIC:
                raise ClipIOError(f"{path}: not an A3DC checkpoint")
            version, n = struct.unpack("<IQ", _read_exact(f, 12, path))
            if version != FORMAT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint version {version}")
            config = json.loads(_read_exact(f, n, path).decode("utf-8"))
            (count,) = struct.unpack("<I", _read_exact(f, 4, path))
            tensors = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", _read_exact(f, 2, path))
                name = _read_exact(f, name_len, path).decode("utf-8")
                (rank,) = struct.unpack("<B", _read_exact(f, 1, path))
                shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, path))
                payload = _read_exact(f, 4 * math.prod(shape), path)
                tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
            if f.read(1):
                raise ClipIOError(f"{path}: trailing bytes after last tensor")
    except OSError as e:
        raise ClipIOError(f"{path}: cannot read checkpoint ({e})") from e
    return config, tensors
