"""Binary PGM (P5) reading and writing.

All rasters in the canonical dataset layout are stored as binary PGM:
16-bit big-endian with maxval 65535 for band data and probability maps,
8-bit with maxval 255 for binary change maps. PGM keeps 16-bit values
portable and bit-exact without any codec dependency.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(Exception):
    """Malformed or unsupported PGM file."""


def _read_header_tokens(data: bytes, n_tokens: int) -> tuple[list[bytes], int]:
    """Return the first whitespace-separated header tokens, skipping comments.

    Comments run from '#' to end of line anywhere in the header.
    Returns the tokens and the offset of the first raster byte (one
    whitespace character after the last token, per the PGM spec).
    """
    tokens: list[bytes] = []
    i = 0
    n = len(data)
    while len(tokens) < n_tokens:
        if i >= n:
            raise PgmError("truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= n or not data[i : i + 1].isspace():
        raise PgmError("PGM header not terminated by whitespace")
    return tokens, i + 1


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a 2D array (uint8 or uint16, big-endian decoded)."""
    data = Path(path).read_bytes()
    tokens, offset = _read_header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise PgmError(f"{path}: bad header field") from exc
    if width <= 0 or height <= 0:
        raise PgmError(f"{path}: non-positive dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    body = data[offset : offset + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise PgmError(f"{path}: raster truncated")
    values = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return values.astype(np.uint16) if maxval > 255 else values.copy()


def write_pgm(path: str | Path, values: np.ndarray, maxval: int = 65535) -> None:
    """Write a 2D array as binary PGM (big-endian when maxval > 255)."""
    if values.ndim != 2:
        raise PgmError(f"expected 2D array, got shape {values.shape}")
    if not 0 < maxval < 65536:
        raise PgmError(f"unsupported maxval {maxval}")
    v = np.asarray(values)
    if np.issubdtype(v.dtype, np.floating):
        v = np.rint(v)
    v = v.astype(np.int64)
    if v.min() < 0 or v.max() > maxval:
        raise PgmError(f"values outside [0, {maxval}]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n{maxval}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + v.astype(dtype).tobytes())
