"""Binary netpbm images: P5 graymaps and P6 pixmaps, 8 bits per sample."""

import os
from typing import BinaryIO, Union

import numpy as np

from app.errors import FormatError, TruncatedData

Source = Union[str, os.PathLike, bytes, BinaryIO]
Sink = Union[str, os.PathLike, BinaryIO]

MAXVAL = 255
_WHITESPACE = b" \t\r\n\v\f"


def _read_all(source: Source) -> bytes:
    if isinstance(source, bytes | bytearray):
        return bytes(source)
    if isinstance(source, str | os.PathLike):
        with open(source, "rb") as f:
            return f.read()
    return source.read()


def _write_all(sink: Sink, data: bytes) -> None:
    if isinstance(sink, str | os.PathLike):
        with open(sink, "wb") as f:
            f.write(data)
    else:
        sink.write(data)


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` header tokens, skipping whitespace and ``#`` comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last token.
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise TruncatedData("netpbm header ends early")
        tokens.append(data[start:pos])
    if pos >= n or data[pos] not in _WHITESPACE:
        raise FormatError("netpbm header must end with a single whitespace byte")
    return tokens, pos + 1


def read_netpbm(source: Source) -> np.ndarray:
    """Decode a P5 (H, W) or P6 (H, W, 3) image with maxval 255 to uint8."""
    data = _read_all(source)
    if len(data) < 2:
        raise TruncatedData("file too short for a netpbm magic number")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}, expected P5 or P6")
    tokens, offset = _header_tokens(data[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"non-numeric netpbm header fields {tokens!r}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid image size {width}x{height}")
    if maxval != MAXVAL:
        raise FormatError(f"maxval must be {MAXVAL}, got {maxval}")

    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedData(f"payload has {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pixels.reshape(shape).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise FormatError(f"P5 needs a 2D uint8 array, got {pixels.dtype} {pixels.shape}")
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    return header + np.ascontiguousarray(pixels).tobytes()


def encode_ppm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise FormatError(f"P6 needs an (H, W, 3) uint8 array, got {pixels.dtype} {pixels.shape}")
    height, width, _ = pixels.shape
    header = f"P6\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    return header + np.ascontiguousarray(pixels).tobytes()


def write_graymap(pixels: np.ndarray, sink: Sink) -> None:
    _write_all(sink, encode_pgm(pixels))


def read_graymap(source: Source) -> np.ndarray:
    pixels = read_netpbm(source)
    if pixels.ndim != 2:
        raise FormatError("expected a P5 graymap, got a P6 pixmap")
    return pixels


def read_ppm(source: Source) -> np.ndarray:
    pixels = read_netpbm(source)
    if pixels.ndim != 3:
        raise FormatError("expected a P6 pixmap, got a P5 graymap")
    return pixels
