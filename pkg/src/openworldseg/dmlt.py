"""DMLT tensor files: `DMLT` magic, version byte, dtype byte (0 = f32),
little-endian u32 rank, u32 dims, then the row-major f32 payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMLT"
VERSION = 1
DTYPE_F32 = 0


class DmltError(ValueError):
    pass


def dump_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    header = MAGIC + struct.pack("<BB", VERSION, DTYPE_F32)
    header += struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def parse_bytes(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise DmltError(f"{name}: not a DMLT file (bad magic)")
    version, dtype = struct.unpack_from("<BB", raw, 4)
    if version != VERSION:
        raise DmltError(f"{name}: unsupported DMLT version {version}")
    if dtype != DTYPE_F32:
        raise DmltError(f"{name}: unsupported dtype code {dtype}")
    (rank,) = struct.unpack_from("<I", raw, 6)
    head_end = 10 + 4 * rank
    if len(raw) < head_end:
        raise DmltError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 10)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = raw[head_end:]
    if len(payload) != 4 * count:
        raise DmltError(f"{name}: payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def write(path, arr: np.ndarray):
    Path(path).write_bytes(dump_bytes(arr))


def read(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DmltError(f"{path}: cannot read ({exc})") from exc
    return parse_bytes(raw, name=str(path))
