"""Binary PGM (P5) reading and writing, 8- and 16-bit."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed file; the message names the byte offset of the problem."""


def write_pgm(path, array, maxval):
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {a.shape}")
    if maxval not in (255, 65535):
        raise ValueError(f"unsupported maxval {maxval}")
    dtype = ">u1" if maxval == 255 else ">u2"
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(a.astype(dtype).tobytes())


def _token(raw, pos, path):
    n = len(raw)
    while pos < n:
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(f"{path}: unexpected end of header at byte {start}")
    tok = raw[start:pos]
    if not tok.isdigit():
        raise FormatError(f"{path}: expected an integer at byte {start}, found {tok[:16]!r}")
    return int(tok), pos


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: bad magic {raw[:2]!r} at byte 0, expected b'P5'")
    w, pos = _token(raw, 2, path)
    h, pos = _token(raw, pos, path)
    maxval, pos = _token(raw, pos, path)
    if maxval not in (255, 65535):
        raise FormatError(f"{path}: unsupported maxval {maxval} before byte {pos}")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing separator after header at byte {pos}")
    pos += 1
    itemsize = 1 if maxval == 255 else 2
    need = w * h * itemsize
    if len(raw) - pos != need:
        raise FormatError(f"{path}: pixel payload at byte {pos} has {len(raw) - pos} bytes, expected {need}")
    return np.frombuffer(raw, dtype=">u1" if itemsize == 1 else ">u2", offset=pos).reshape(h, w).copy()
