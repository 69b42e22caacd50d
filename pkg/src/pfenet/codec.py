"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def _header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` and return them with the pixel offset."""
    if buf[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()}, found {buf[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed header field", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise ParseError(f"invalid dimensions {w}x{h}", 2)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", pos - 1)
    return w, h, maxval, pos


def _decode(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    w, h, _, pos = _header(buf, magic)
    need = w * h * channels
    if len(buf) - pos < need:
        raise ParseError(f"pixel data truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return px.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM needs an [H,W,3] uint8 array")
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + image.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("PGM needs an [H,W] uint8 array")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + gray.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    return _decode(buf, b"P6", 3)


def decode_pgm(buf: bytes) -> np.ndarray:
    return _decode(buf, b"P5", 1)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(gray))


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Binary mask stored as {0,255}."""
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path: str | Path) -> np.ndarray:
    return (read_pgm(path) > 0).astype(np.uint8)


def prior_to_gray(values: np.ndarray) -> np.ndarray:
    """Prior values in [0,1] to 8-bit gray: ``round(255 * y)``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * v).astype(np.uint8)
