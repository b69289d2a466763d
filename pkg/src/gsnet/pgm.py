"""Binary PGM (P5) reading and writing, 8- or 16-bit samples."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .checkpoint import atomic_write


def encode_pgm(samples: np.ndarray, maxval: int) -> bytes:
    if samples.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {samples.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in 1..65535, got {maxval}")
    h, w = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    body = np.ascontiguousarray(samples, dtype=dtype).tobytes()
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body


def write_pgm(path, samples: np.ndarray, maxval: int) -> None:
    atomic_write(path, encode_pgm(samples, maxval))


def decode_pgm(buf: bytes) -> tuple[np.ndarray, int]:
    """Returns (integer samples [H,W], maxval)."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    return data.reshape(h, w).astype(np.int64), maxval


def read_pgm(path) -> tuple[np.ndarray, int]:
    return decode_pgm(Path(path).read_bytes())
