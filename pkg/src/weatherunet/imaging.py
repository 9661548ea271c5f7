"""Image container, PPM (P6) I/O, RGB/HSV conversion and crop tiling."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RGB = "RGB"
HSV = "HSV"
SPACES = (RGB, HSV)


class ImageFormatError(ValueError):
    """Malformed or unsupported raster file."""


class ColorSpaceError(ValueError):
    """Operation called on an image tagged with the wrong color space."""


class DimensionError(ValueError):
    """Crop grid and image geometry disagree."""


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x 3 float64 raster with values in [0, 1].

    HSV images store hue as degrees / 360. The pixel buffer is made
    read-only on construction so an Image can be shared freely.
    """

    data: np.ndarray
    space: str = RGB

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimensionError(f"expected HxWx3 array, got shape {arr.shape}")
        if self.space not in SPACES:
            raise ColorSpaceError(f"unknown color space {self.space!r}")
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.space == other.space and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Image({self.width}x{self.height}, {self.space})"

    def copy(self) -> "Image":
        return Image(self.data, self.space)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-up."""
    q = np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of PPM header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> Image:
    if buf[:2] != b"P6":
        raise ImageFormatError(f"bad magic {buf[:2]!r}, expected b'P6'")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"non-integer header field {tok!r}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported max value {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after max value")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated pixel payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.astype(np.float64) / 255.0, RGB)


def encode_ppm(img: Image) -> bytes:
    if img.space != RGB:
        raise ColorSpaceError("PPM output requires an RGB image; convert first")
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + quantize(img.data).tobytes()


def read_ppm(path: str | os.PathLike) -> Image:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_ppm(buf)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def write_ppm(img: Image, path: str | os.PathLike) -> None:
    payload = encode_ppm(img)
    with open(path, "wb") as fh:
        fh.write(payload)


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    vmax = rgb.max(axis=-1)
    vmin = rgb.min(axis=-1)
    delta = vmax - vmin
    safe = np.where(delta > 0, delta, 1.0)

    hue = np.zeros_like(vmax)
    rmax = (vmax == r) & (delta > 0)
    gmax = (vmax == g) & (delta > 0) & ~rmax
    bmax = (delta > 0) & ~rmax & ~gmax
    hue = np.where(rmax, ((g - b) / safe) % 6.0, hue)
    hue = np.where(gmax, (b - r) / safe + 2.0, hue)
    hue = np.where(bmax, (r - g) / safe + 4.0, hue)
    hue = hue / 6.0
    hue = np.where(hue >= 1.0, hue - 1.0, hue)

    sat = np.where(vmax > 0, delta / np.where(vmax > 0, vmax, 1.0), 0.0)
    return np.stack([hue, sat, vmax], axis=-1)


def hsv_to_rgb_array(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def rgb_to_hsv(img: Image) -> Image:
    if img.space != RGB:
        raise ColorSpaceError("rgb_to_hsv expects an RGB image")
    return Image(rgb_to_hsv_array(img.data), HSV)


def hsv_to_rgb(img: Image) -> Image:
    if img.space != HSV:
        raise ColorSpaceError("hsv_to_rgb expects an HSV image")
    return Image(hsv_to_rgb_array(img.data), RGB)


def to_space(img: Image, space: str) -> Image:
    if img.space == space:
        return img
    return rgb_to_hsv(img) if space == HSV else hsv_to_rgb(img)


@dataclass(frozen=True)
class CropGrid:
    cols: int
    rows: int
    crop_width: int
    crop_height: int

    def __post_init__(self):
        if min(self.cols, self.rows, self.crop_width, self.crop_height) < 1:
            raise DimensionError(f"grid fields must be positive: {self}")

    @property
    def count(self) -> int:
        return self.cols * self.rows

    @property
    def width(self) -> int:
        return self.cols * self.crop_width

    @property
    def height(self) -> int:
        return self.rows * self.crop_height

    @classmethod
    def for_size(cls, width: int, height: int, cols: int, rows: int) -> "CropGrid":
        if width % cols or height % rows:
            raise DimensionError(f"{width}x{height} is not divisible into {cols}x{rows} crops")
        return cls(cols, rows, width // cols, height // rows)

    def check(self, width: int, height: int) -> None:
        if (width, height) != (self.width, self.height):
            raise DimensionError(
                f"image {width}x{height} does not match grid "
                f"{self.cols}x{self.rows} of {self.crop_width}x{self.crop_height}"
            )


def split_crops(img: Image, grid: CropGrid) -> list[Image]:
    """Cut ``img`` into grid crops, row-major (left to right, then top to bottom)."""
    grid.check(img.width, img.height)
    ch, cw = grid.crop_height, grid.crop_width
    crops = []
    for r in range(grid.rows):
        for c in range(grid.cols):
            crops.append(Image(img.data[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw], img.space))
    return crops


def join_crops(crops: Sequence[Image], grid: CropGrid) -> Image:
    if len(crops) != grid.count:
        raise DimensionError(f"expected {grid.count} crops, got {len(crops)}")
    spaces = {c.space for c in crops}
    if len(spaces) != 1:
        raise ColorSpaceError(f"crops mix color spaces: {sorted(spaces)}")
    ch, cw = grid.crop_height, grid.crop_width
    out = np.empty((grid.height, grid.width, 3), dtype=np.float64)
    for k, crop in enumerate(crops):
        if (crop.width, crop.height) != (cw, ch):
            raise DimensionError(f"crop {k} is {crop.width}x{crop.height}, expected {cw}x{ch}")
        r, c = divmod(k, grid.cols)
        out[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw] = crop.data
    return Image(out, spaces.pop())


def mse(a: Image, b: Image) -> float:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    return float(np.mean(diff * diff))
