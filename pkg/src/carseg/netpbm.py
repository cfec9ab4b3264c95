"""Binary PPM (P6) and PGM (P5) images, 8-bit only."""

from __future__ import annotations

from pathlib import Path
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, Path]


class NetpbmError(ValueError):
    pass


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n" + f"{width} {height}\n255\n".encode("ascii")


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(_header(b"P6", w, h))
        f.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"expected H x W uint8, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(_header(b"P5", w, h))
        f.write(np.ascontiguousarray(gray).tobytes())


def _parse(data: bytes) -> Tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise NetpbmError("truncated header")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n:
        raise NetpbmError("truncated header")
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError(f"malformed header fields {tokens[1:]!r}") from None
    if width <= 0 or height <= 0:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"only 8-bit maxval 255 is supported, got {maxval}")
    return magic, width, height, maxval, pos


def _read(path: PathLike, expect: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, width, height, _, offset = _parse(data)
    if magic != expect:
        raise NetpbmError(f"{path}: expected {expect.decode()}, found {magic.decode()}")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    payload = data[offset:offset + size]
    if len(payload) < size:
        raise NetpbmError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def read_ppm(path: PathLike) -> np.ndarray:
    return _read(path, b"P6").copy()


def read_pgm(path: PathLike) -> np.ndarray:
    return _read(path, b"P5").copy()
