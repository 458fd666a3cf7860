"""DMT1 binary tensor files: magic, u32 rank, u32 extents, f32 row-major payload."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMT1"


class CorruptTensorError(Exception):
    """Raised when a DMT1 file fails structural validation."""


def save_dmt(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_dmt(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CorruptTensorError(f"{path}: missing DMT1 magic")
    (rank,) = struct.unpack_from("<I", raw, 4)
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise CorruptTensorError(f"{path}: truncated extent table (rank={rank})")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise CorruptTensorError(
            f"{path}: payload holds {len(payload) // 4} floats, shape {shape} needs {count}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return np.ascontiguousarray(arr, dtype=np.float32)


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
