"""Raster utilities: validation, patch extraction, rotations, block downsampling, file I/O.

A raster is a 2D ``numpy`` float array indexed ``[row, col]``. Throughout the
package ``x`` is the column and ``y`` is the row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

F32_MAGIC = b"NCF1"
_F32_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    """Raised when a raster file cannot be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class PatchSpec:
    """Square crop geometry: top-left corner (x, y) and side length."""

    x: int
    y: int
    size: int


def as_raster(img, dtype=np.float64) -> np.ndarray:
    """Validate ``img`` as a raster and return it as a 2D array of ``dtype``."""
    arr = np.asarray(img, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"raster must be 2D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"raster must be at least 1x1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster contains non-finite values")
    return arr


def crop(img: np.ndarray, spec: PatchSpec) -> np.ndarray:
    h, w = img.shape
    if spec.size < 1:
        raise ValueError(f"patch size must be >= 1, got {spec.size}")
    if spec.x < 0 or spec.x + spec.size > w:
        raise IndexError(f"patch x={spec.x} size={spec.size} outside width {w}")
    if spec.y < 0 or spec.y + spec.size > h:
        raise IndexError(f"patch y={spec.y} size={spec.size} outside height {h}")
    return img[spec.y:spec.y + spec.size, spec.x:spec.x + spec.size].copy()


def rotate90(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate a square raster counterclockwise by ``90 * quarter_turns`` degrees."""
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"rotate90 needs a square raster, got shape {img.shape}")
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    return np.ascontiguousarray(np.rot90(img, quarter_turns))


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling.

    Trailing rows and columns that do not fill a whole block are dropped.
    """
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return img.copy()
    h, w = img.shape
    h2, w2 = h // factor, w // factor
    if h2 == 0 or w2 == 0:
        raise ValueError(f"raster {img.shape} smaller than downsample factor {factor}")
    blocks = img[:h2 * factor, :w2 * factor].reshape(h2, factor, w2, factor)
    return blocks.mean(axis=(1, 3))


def load_pgm(path) -> np.ndarray:
    """Load a binary (P5) PGM with maxval 255 as a float raster in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    pos = 0
    fields = []

    def skip_ws_and_comments(pos):
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        return pos

    while len(fields) < 4:
        pos = skip_ws_and_comments(pos)
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise RasterFormatError(f"truncated PGM header in {path}", pos)
        fields.append((data[start:pos], start))
    magic, magic_off = fields[0]
    if magic != b"P5":
        raise RasterFormatError(f"not a binary PGM (magic {magic!r}) in {path}", magic_off)
    dims = []
    for tok, off in fields[1:]:
        try:
            dims.append(int(tok))
        except ValueError:
            raise RasterFormatError(f"bad PGM header field {tok!r} in {path}", off) from None
    width, height, maxval = dims
    if width < 1 or height < 1:
        raise RasterFormatError(f"bad PGM dimensions {width}x{height} in {path}", fields[1][1])
    if maxval != 255:
        raise RasterFormatError(f"unsupported PGM maxval {maxval} in {path}", fields[3][1])
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise RasterFormatError(f"missing PGM payload separator in {path}", pos)
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise RasterFormatError(
            f"truncated PGM payload in {path}: need {need} bytes, have {len(data) - pos}", len(data)
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def save_pgm(img: np.ndarray, path) -> None:
    """Save a [0, 1] raster as P5 PGM; values are clipped and rounded to 8 bits."""
    img = as_raster(img)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(b"P5 %d %d 255\n" % (w, h) + q.tobytes())


def load_f32(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _F32_HEADER.size:
        raise RasterFormatError(f"truncated f32 header in {path}", len(data))
    magic, width, height, reserved = _F32_HEADER.unpack_from(data, 0)
    if magic != F32_MAGIC:
        raise RasterFormatError(f"bad f32 magic {magic!r} in {path}", 0)
    if width < 1 or height < 1:
        raise RasterFormatError(f"bad f32 dimensions {width}x{height} in {path}", 4)
    if reserved != 0:
        raise RasterFormatError(f"nonzero reserved field in {path}", 12)
    need = 4 * width * height
    have = len(data) - _F32_HEADER.size
    if have != need:
        raise RasterFormatError(
            f"f32 payload size mismatch in {path}: need {need} bytes, have {have}",
            _F32_HEADER.size + min(have, need),
        )
    arr = np.frombuffer(data, dtype="<f4", offset=_F32_HEADER.size)
    return arr.reshape(height, width).astype(np.float32)


def save_f32(img: np.ndarray, path) -> None:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"raster must be 2D, got shape {arr.shape}")
    h, w = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(_F32_HEADER.pack(F32_MAGIC, w, h, 0) + payload)
