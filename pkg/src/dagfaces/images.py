"""Float image buffers and binary PGM/PPM storage.

Pixel values live in [-1, 1]. On disk images are 8-bit binary netpbm (P5
gray, P6 color) with maxval 255; loading maps a byte p to p / 127.5 - 1 and
saving rounds (v + 1) * 127.5 half-up. Both directions are exact enough
that save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ImageBuffer:
    """Immutable (H, W, C) float64 image with values in [-1, 1], C in {1, 3}."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W) or (H, W, C) with C in {{1, 3}}, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not np.isfinite(arr).all():
            raise ValueError("image values must be finite")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -1.0 - 1e-9 or hi > 1.0 + 1e-9:
            raise ValueError(f"image values must lie in [-1, 1], got [{lo:g}, {hi:g}]")
        # Convex-combination arithmetic may overshoot by an ulp; pin it down.
        arr = np.clip(arr, -1.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def plane(self) -> np.ndarray:
        """The (H, W) array of a single-channel image."""
        if self.channels != 1:
            raise ValueError("plane() is only defined for single-channel images")
        return self.data[:, :, 0]


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and # comments, then read one token.
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated netpbm header")
    return buf[start:pos], pos


def load_image(path) -> ImageBuffer:
    """Read a binary 8-bit PGM (P5) or PPM (P6) file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    wtok, pos = _read_token(buf, pos)
    htok, pos = _read_token(buf, pos)
    mtok, pos = _read_token(buf, pos)
    width, height, maxval = int(wtok), int(htok), int(mtok)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    raster = buf[pos : pos + count]
    if len(raster) != count:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {count}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64)
    arr = arr.reshape(height, width, channels)
    return ImageBuffer(arr / 127.5 - 1.0)


def save_image(img: ImageBuffer, path) -> None:
    """Write a binary 8-bit PGM (1 channel) or PPM (3 channels) file."""
    # Round half up; values are already clamped to [-1, 1] by the buffer.
    levels = np.floor((img.data + 1.0) * 127.5 + 0.5)
    levels = np.clip(levels, 0, 255).astype(np.uint8)
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(levels.tobytes())


def bilinear_sample(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) array at fractional pixel indices with edge clamp.

    Coordinates are pixel indices (column x, row y); integer values hit
    pixel centers exactly. Coordinates within 1e-9 of an integer are snapped
    to it first, so mappings that are analytically integral (identity or
    whole-pixel translations) reproduce source pixels bit for bit despite
    solver round-off. Out-of-range samples take the nearest edge pixel.
    """
    h, w = data.shape[0], data.shape[1]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    rx = np.round(xs)
    ry = np.round(ys)
    xs = np.where(np.abs(xs - rx) < 1e-9, rx, xs)
    ys = np.where(np.abs(ys - ry) < 1e-9, ry, ys)

    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    xi0 = np.clip(x0.astype(np.int64), 0, w - 1)
    xi1 = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    yi0 = np.clip(y0.astype(np.int64), 0, h - 1)
    yi1 = np.clip(y0.astype(np.int64) + 1, 0, h - 1)

    v00 = data[yi0, xi0]
    v01 = data[yi0, xi1]
    v10 = data[yi1, xi0]
    v11 = data[yi1, xi1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def tile_grid(rows, pad: int = 1, pad_value: float = 1.0) -> ImageBuffer:
    """Assemble a grid of equally sized images into one contact sheet.

    `rows` is a sequence of image rows; every tile must share one shape.
    Tiles are separated (and framed) by `pad` pixels of `pad_value`.
    """
    if not rows or any(len(r) == 0 for r in rows):
        raise ValueError("tile_grid needs at least one image per row")
    if pad < 0:
        raise ValueError("pad must be non-negative")
    tiles = [list(r) for r in rows]
    first = tiles[0][0]
    th, tw, tc = first.height, first.width, first.channels
    for row in tiles:
        for img in row:
            if (img.height, img.width, img.channels) != (th, tw, tc):
                raise ValueError("all tiles must share one shape")
    n_rows = len(tiles)
    n_cols = max(len(r) for r in tiles)
    height = n_rows * th + (n_rows + 1) * pad
    width = n_cols * tw + (n_cols + 1) * pad
    canvas = np.full((height, width, tc), float(pad_value))
    for i, row in enumerate(tiles):
        top = pad + i * (th + pad)
        for j, img in enumerate(row):
            left = pad + j * (tw + pad)
            canvas[top : top + th, left : left + tw] = img.data
    return ImageBuffer(canvas)
