"""Binary raster codecs: PPM (P6) for images, PGM (P5) for label maps,
24-bit BMP for review bundles.

Writers emit canonical headers so identical rasters produce identical bytes.
Readers accept the usual netpbm liberties (comments, arbitrary whitespace).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import IGNORE, Image, LabelMap

MAXVAL = 255


def unit_to_u8(arr: np.ndarray) -> np.ndarray:
    """Unit-range floats to 8-bit, round-to-nearest."""
    return np.rint(np.clip(arr, 0.0, 1.0) * MAXVAL).astype(np.uint8)


def u8_to_unit(arr: np.ndarray) -> np.ndarray:
    """8-bit to unit range, exactly value/255."""
    return arr.astype(np.float64) / MAXVAL


# -- netpbm ------------------------------------------------------------------

def _read_pnm_tokens(data: bytes, count: int, offset: int) -> tuple[list[int], int]:
    """Read `count` whitespace/comment-separated integer tokens."""
    tokens: list[int] = []
    i = offset
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated netpbm header")
        tokens.append(int(data[start:i]))
    return tokens, i + 1  # skip the single whitespace after the last token


def encode_ppm(image: Image) -> bytes:
    u8 = unit_to_u8(image.data)
    header = f"P6\n{image.width} {image.height}\n{MAXVAL}\n".encode("ascii")
    return header + u8.tobytes()


def decode_ppm(data: bytes) -> Image:
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM (P6) file")
    (w, h, maxval), offset = _read_pnm_tokens(data, 3, 2)
    if maxval != MAXVAL:
        raise ValueError(f"unsupported PPM maxval {maxval}, expected {MAXVAL}")
    expected = w * h * 3
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise ValueError(f"PPM raster truncated: {len(raster)} of {expected} bytes")
    u8 = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return Image(u8_to_unit(u8))


def encode_pgm(label_map: LabelMap) -> bytes:
    header = f"P5\n{label_map.width} {label_map.height}\n{MAXVAL}\n".encode("ascii")
    return header + label_map.data.tobytes()


def decode_pgm(data: bytes) -> LabelMap:
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    (w, h, maxval), offset = _read_pnm_tokens(data, 3, 2)
    if maxval != MAXVAL:
        raise ValueError(f"unsupported PGM maxval {maxval}, expected {MAXVAL}")
    expected = w * h
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise ValueError(f"PGM raster truncated: {len(raster)} of {expected} bytes")
    return LabelMap(np.frombuffer(raster, dtype=np.uint8).reshape(h, w))


def write_ppm(path: str | Path, image: Image):
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path: str | Path) -> Image:
    return decode_ppm(Path(path).read_bytes())


def write_pgm(path: str | Path, label_map: LabelMap):
    Path(path).write_bytes(encode_pgm(label_map))


def read_pgm(path: str | Path) -> LabelMap:
    return decode_pgm(Path(path).read_bytes())


# -- BMP ---------------------------------------------------------------------
# 24-bit uncompressed (BI_RGB), bottom-up rows padded to 4 bytes: the plain
# variant every browser renders.

def encode_bmp(rgb_u8: np.ndarray) -> bytes:
    if rgb_u8.ndim != 3 or rgb_u8.shape[2] != 3 or rgb_u8.dtype != np.uint8:
        raise ValueError(f"expected uint8 (H, W, 3) array, got {rgb_u8.shape} {rgb_u8.dtype}")
    h, w = rgb_u8.shape[:2]
    row_size = (w * 3 + 3) & ~3
    image_size = row_size * h
    file_size = 14 + 40 + image_size

    header = struct.pack("<2sIHHI", b"BM", file_size, 0, 0, 54)
    info = struct.pack("<IiiHHIIiiII", 40, w, h, 1, 24, 0, image_size, 2835, 2835, 0, 0)

    rows = np.zeros((h, row_size), dtype=np.uint8)
    bgr = rgb_u8[::-1, :, ::-1]  # bottom-up, BGR byte order
    rows[:, : w * 3] = bgr.reshape(h, w * 3)
    return header + info + rows.tobytes()


def decode_bmp(data: bytes) -> np.ndarray:
    if data[:2] != b"BM":
        raise ValueError("not a BMP file")
    (pixel_offset,) = struct.unpack_from("<I", data, 10)
    size, w, h, _planes, bpp, compression = struct.unpack_from("<IiiHHI", data, 14)
    if size < 40 or bpp != 24 or compression != 0:
        raise ValueError("only 24-bit uncompressed BMP is supported")
    if h <= 0:
        raise ValueError("only bottom-up BMP is supported")
    row_size = (w * 3 + 3) & ~3
    rows = np.frombuffer(data, dtype=np.uint8, count=row_size * h, offset=pixel_offset)
    rows = rows.reshape(h, row_size)[:, : w * 3].reshape(h, w, 3)
    return np.ascontiguousarray(rows[::-1, :, ::-1])


def write_bmp(path: str | Path, rgb_u8: np.ndarray):
    Path(path).write_bytes(encode_bmp(rgb_u8))


def read_bmp(path: str | Path) -> np.ndarray:
    return decode_bmp(Path(path).read_bytes())
