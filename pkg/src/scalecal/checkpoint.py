"""Versioned binary checkpoints.

Layout (little-endian)::

    b"SCALECAL"  u32 version=1  u32 entry_count
    per entry:   u16 name_len  name(utf-8)  u8 rank  u32 dims[rank]  f32 payload

Model metadata (architecture string) rides along as a rank-1, zero-length
entry whose name starts with ``meta:``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"SCALECAL"
VERSION = 1
META_PREFIX = "meta:"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: list[tuple[str, np.ndarray]], meta: Optional[str] = None) -> None:
    """Write entries atomically (temp file + rename) so a crash never leaves a torn file."""
    entries = list(arrays)
    if meta is not None:
        entries.append((META_PREFIX + meta, np.zeros(0, dtype=np.float32)))
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"entry name too long ({len(raw)} bytes)")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], Optional[str]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 16
        arrays: dict[str, np.ndarray] = {}
        meta = None
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
            off += 4 * n
            if name.startswith(META_PREFIX):
                meta = name[len(META_PREFIX):]
            else:
                arrays[name] = arr.reshape(dims)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from None
    return arrays, meta


def save_model(model, path) -> None:
    save_arrays(path, model.state_items(), meta=model.arch_string())


def load_model(path):
    from .models import model_from_arch

    arrays, meta = load_arrays(path)
    if meta is None:
        raise CheckpointError(f"{path}: no architecture metadata entry")
    model = model_from_arch(meta)
    model.load_state(arrays)
    return model
