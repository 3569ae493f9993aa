"""Binary file formats: PPM/PGM images, raw float32 maps, concise sets.

All multi-byte values are little-endian. See ``docs/formats.md``.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .evalbench import normalize_to_uint8
from .factorize import ConciseSet

CONCISE_MAGIC = b"DCNS"
_PNM_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")

OVERLAY_ALPHA = 0.6
OVERLAY_COLOR = (255, 0, 0)


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ PNM

def encode_pnm(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    if grid.dtype != np.uint8:
        raise FormatError("PNM payload must be uint8")
    if grid.ndim == 2:
        h, w = grid.shape
        return b"P5\n%d %d\n255\n" % (w, h) + grid.tobytes()
    if grid.ndim == 3 and grid.shape[2] == 3:
        h, w, _ = grid.shape
        return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(grid).tobytes()
    raise FormatError(f"cannot encode array of shape {grid.shape} as PNM")


def decode_pnm(data: bytes) -> np.ndarray:
    """P5 -> (h, w) uint8, P6 -> (h, w, 3) uint8."""
    m = _PNM_HEADER.match(data)
    if not m:
        raise FormatError("not a binary PGM/PPM file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    ch = 1 if kind == b"P5" else 3
    body = data[m.end():]
    if len(body) != w * h * ch:
        raise FormatError(f"expected {w * h * ch} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def write_pnm(path: str | Path, grid: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(grid))


def read_pnm(path: str | Path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def image_to_tensor(rgb: np.ndarray) -> np.ndarray:
    """(h, w, 3) uint8 -> (3, h, w) float64 in [0, 1]."""
    return np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0


def tensor_to_image(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0, 1).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def read_image(path: str | Path) -> np.ndarray:
    rgb = read_pnm(path)
    if rgb.ndim != 3:
        raise FormatError(f"{path} is not a colour (P6) image")
    return image_to_tensor(rgb)


def read_mask(path: str | Path) -> np.ndarray:
    grid = read_pnm(path)
    if grid.ndim != 2:
        raise FormatError(f"{path} is not a greyscale (P5) mask")
    return grid


# ------------------------------------------------------------ raw maps

def encode_raw_map(values: np.ndarray) -> bytes:
    v = np.asarray(values)
    if v.ndim != 2:
        raise FormatError("raw maps are 2-d grids")
    h, w = v.shape
    return struct.pack("<II", h, w) + v.astype("<f4").tobytes()


def decode_raw_map(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise FormatError("raw map shorter than its header")
    h, w = struct.unpack_from("<II", data)
    if len(data) != 8 + 4 * h * w:
        raise FormatError(f"raw map header says {h}x{w} but payload has {len(data) - 8} bytes")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)


def write_raw_map(path: str | Path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_raw_map(values))


def read_map(path: str | Path) -> np.ndarray:
    """Read a raw ``.f32`` map or a normalised ``.pgm`` map as float64."""
    path = Path(path)
    if path.suffix == ".pgm":
        return read_mask(path).astype(np.float64)
    return decode_raw_map(path.read_bytes())


# ---------------------------------------------------------- concise sets

def encode_concise(cs: ConciseSet) -> bytes:
    ident = cs.image_id.encode("utf-8")
    z, h, w = cs.maps.shape
    n = cs.mixing.shape[0]
    head = CONCISE_MAGIC + struct.pack("<I", len(ident)) + ident + struct.pack("<IIII", z, h, w, n)
    return head + cs.maps.astype("<f4").tobytes() + cs.mixing.astype("<f4").tobytes()


def decode_concise(data: bytes) -> ConciseSet:
    if data[:4] != CONCISE_MAGIC:
        raise FormatError("not a concise-set file")
    (k,) = struct.unpack_from("<I", data, 4)
    ident = data[8:8 + k].decode("utf-8")
    z, h, w, n = struct.unpack_from("<IIII", data, 8 + k)
    off = 8 + k + 16
    if len(data) != off + 4 * (z * h * w + n * z):
        raise FormatError("concise-set payload size does not match its header")
    maps = np.frombuffer(data, "<f4", z * h * w, off).reshape(z, h, w).astype(np.float64)
    mixing = np.frombuffer(data, "<f4", n * z, off + 4 * z * h * w).reshape(n, z).astype(np.float64)
    return ConciseSet(ident, maps, mixing)


# --------------------------------------------------------------- overlays

def overlay(rgb: np.ndarray, values: np.ndarray, alpha: float = OVERLAY_ALPHA,
            color: tuple = OVERLAY_COLOR) -> np.ndarray:
    """Alpha-blend a min-max normalised heat map over a uint8 RGB image.

    out = round((1 - alpha*h) * pixel + alpha*h * color), h = map/255.
    A zero heat value leaves the pixel untouched.
    """
    rgb = np.asarray(rgb)
    heat = normalize_to_uint8(values).astype(np.float64) / 255.0
    if heat.shape != rgb.shape[:2]:
        raise ValueError(f"map {heat.shape} does not match image {rgb.shape[:2]}")
    a = (alpha * heat)[..., None]
    out = (1.0 - a) * rgb + a * np.asarray(color, dtype=np.float64)
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)


def montage(tiles: list, gap: int = 2) -> np.ndarray:
    """Lay equally sized RGB tiles left to right on a white strip."""
    if not tiles:
        raise ValueError("no tiles")
    h, w, _ = tiles[0].shape
    strip = np.full((h, len(tiles) * (w + gap) - gap, 3), 255, dtype=np.uint8)
    for i, t in enumerate(tiles):
        strip[:, i * (w + gap):i * (w + gap) + w] = t
    return strip
