"""Binary PGM (P5) and PPM (P6) with 8-bit samples.

Headers are written in the fixed form ``P5\\n<w> <h>\\n255\\n``; the reader
tolerates arbitrary whitespace and ``#`` comments.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def pgm_bytes(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise PnmError(f"PGM wants a 2-D map, got shape {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.astype(np.uint8).tobytes()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise PnmError(f"PPM wants an (H, W, 3) image, got shape {rgb.shape}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes()


def _parse_header(raw: bytes, name: str):
    if raw[:2] not in (b"P5", b"P6"):
        raise PnmError(f"{name}: not a binary PGM/PPM (magic {raw[:2]!r})")
    magic = raw[:2].decode("ascii")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(raw):
            raise PnmError(f"{name}: truncated header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise PnmError(f"{name}: unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            token = raw[pos:end]
            if not token.isdigit():
                raise PnmError(f"{name}: bad header token {token!r}")
            fields.append(int(token))
            pos = end
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise PnmError(f"{name}: only 8-bit maxval 255 supported, got {maxval}")
    return magic, width, height, pos


def parse_pgm(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    magic, w, h, pos = _parse_header(raw, name)
    if magic != "P5":
        raise PnmError(f"{name}: expected P5, got {magic}")
    if len(raw) - pos < w * h:
        raise PnmError(f"{name}: payload holds {len(raw) - pos} bytes, expected {w * h}")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def parse_ppm(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    magic, w, h, pos = _parse_header(raw, name)
    if magic != "P6":
        raise PnmError(f"{name}: expected P6, got {magic}")
    if len(raw) - pos < w * h * 3:
        raise PnmError(f"{name}: payload holds {len(raw) - pos} bytes, expected {w * h * 3}")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


def write_pgm(path, gray: np.ndarray):
    Path(path).write_bytes(pgm_bytes(gray))


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    return parse_pgm(path.read_bytes(), name=str(path))


def write_ppm(path, rgb: np.ndarray):
    Path(path).write_bytes(ppm_bytes(rgb))


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    return parse_ppm(path.read_bytes(), name=str(path))
