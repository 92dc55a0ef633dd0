"""
Image I/O and rendering.

Images are float arrays of shape (C, H, W) with values in [0, 1]. Netpbm files
are parsed here so malformed headers can be reported with their byte offset;
all encoding goes through Pillow and colormaps come from matplotlib.
"""
import io
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .exceptions import ImageFormatError

logger = logging.getLogger(__name__)

NETPBM_CHANNELS = {b"P2": 1, b"P3": 3, b"P5": 1, b"P6": 3}
WHITESPACE = b" \t\n\r\v\f"


class _HeaderReader:
    """ Tokenizer over a netpbm header that tracks byte offsets and skips comments """

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip(self):
        while self.pos < len(self.data):
            char = self.data[self.pos:self.pos + 1]
            if char == b"#":
                end = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if end < 0 else end + 1
            elif char in WHITESPACE:
                self.pos += 1
            else:
                break

    def integer(self, what: str) -> Tuple[int, int]:
        self.skip()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if start == self.pos:
            if start >= len(self.data):
                raise ImageFormatError(f"Unexpected end of file while reading {what}", start)
            raise ImageFormatError(f"Expected a decimal {what}", start)
        return int(self.data[start:self.pos]), start


def parse_netpbm(data: bytes) -> np.ndarray:
    """ Decode PGM/PPM bytes (P2, P3, P5, P6) into a (C, H, W) float32 array """
    magic = data[:2]
    if magic not in NETPBM_CHANNELS:
        raise ImageFormatError(f"Unknown netpbm magic {magic!r}", 0)
    channels = NETPBM_CHANNELS[magic]
    reader = _HeaderReader(data)
    reader.pos = 2
    width, offset = reader.integer("width")
    if width < 1:
        raise ImageFormatError(f"Image width must be positive, got {width}", offset)
    height, offset = reader.integer("height")
    if height < 1:
        raise ImageFormatError(f"Image height must be positive, got {height}", offset)
    maxval, offset = reader.integer("maxval")
    if maxval > 255:
        raise ImageFormatError(f"unsupported maxval {maxval}", offset)
    if maxval < 1:
        raise ImageFormatError(f"maxval must be positive, got {maxval}", offset)

    count = width * height * channels
    if magic in (b"P5", b"P6"):
        if reader.pos >= len(data) or data[reader.pos:reader.pos + 1] not in WHITESPACE:
            raise ImageFormatError("Expected a single whitespace before the raster", reader.pos)
        start = reader.pos + 1
        raw = data[start:start + count]
        if len(raw) < count:
            raise ImageFormatError(f"Truncated raster: expected {count} bytes, found {len(raw)}", len(data))
        raster = np.frombuffer(raw, dtype=np.uint8)
    else:
        values = []
        for _ in range(count):
            value, offset = reader.integer("sample")
            values.append(value)
        raster = np.asarray(values)
    if raster.max(initial=0) > maxval:
        raise ImageFormatError(f"Sample exceeds maxval {maxval}", reader.pos)
    image = raster.reshape(height, width, channels).transpose(2, 0, 1)
    return image.astype(np.float32) / np.float32(maxval)


def quantize(image: np.ndarray) -> np.ndarray:
    """ [0, 1] floats to uint8 with round-half-up """
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _as_chw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image[None]
    if image.ndim != 3:
        raise ValueError(f"Expected an image of shape (C, H, W) or (H, W), got {image.shape}")
    return image


def to_pil(image: np.ndarray) -> Image.Image:
    """ A (C, H, W) or (H, W) float image as an 8-bit Pillow image in mode L or RGB """
    pixels = quantize(_as_chw(image))
    if pixels.shape[0] == 1:
        return Image.fromarray(pixels[0])
    if pixels.shape[0] == 3:
        return Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
    raise ValueError(f"Expected 1 or 3 channels, got {pixels.shape[0]}")


def encode_netpbm(image: np.ndarray) -> bytes:
    """ Encode a (C, H, W) image as binary PGM (C=1) or PPM (C=3) """
    buffer = io.BytesIO()
    to_pil(image).save(buffer, format="PPM")
    return buffer.getvalue()


def read_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return parse_netpbm(path.read_bytes())
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        array = np.asarray(img, dtype=np.float32) / np.float32(255)
    return array[None] if array.ndim == 2 else array.transpose(2, 0, 1)


def write_image(image: np.ndarray, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    netpbm = path.suffix.lower() in (".pgm", ".ppm", ".pnm")
    to_pil(image).save(path, format="PPM" if netpbm else None)


def read_mask(path: Union[str, Path]) -> np.ndarray:
    return read_image(path)[0] > 0.5


def write_mask(mask: np.ndarray, path: Union[str, Path]):
    write_image(np.asarray(mask, dtype=np.float32)[None], path)


def upsample_nearest(grid: np.ndarray, factor: Union[int, Tuple[int, int]]) -> np.ndarray:
    """ Expand each cell of the trailing (rows, cols) axes into a factor block """
    rows, cols = (factor, factor) if isinstance(factor, int) else factor
    return np.repeat(np.repeat(grid, rows, axis=-2), cols, axis=-1)


def apply_colormap(values: np.ndarray, colormap: str = "viridis") -> np.ndarray:
    """ Map values in [0, 1] of any shape S through a matplotlib colormap to RGB of shape (3, *S) """
    if colormap not in colormaps:
        raise ValueError(f"Unknown colormap '{colormap}'")
    rgba = colormaps[colormap](np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0))
    return np.moveaxis(rgba[..., :3], -1, 0).astype(np.float32)


def render_heatmap(
    values: np.ndarray,
    grid_shape: Optional[Tuple[int, int]] = None,
    colormap: str = "viridis",
    upsample: Union[int, Tuple[int, int]] = 1,
) -> np.ndarray:
    """
    Render a patch-grid heatmap as an RGB image.

    Parameters
    ----------
    values : np.ndarray
        Length-N vector (reshaped with ``grid_shape``) or a (rows, cols) grid.
    grid_shape : tuple, optional
        Grid to reshape a vector into; defaults to a square grid.
    colormap : str
        Name of a matplotlib colormap.
    upsample : int or tuple
        Nearest-neighbour patch-to-pixel factor.

    Returns
    -------
    np.ndarray
        (3, rows * f_h, cols * f_w). Values are min-max normalized; a constant
        input renders as the colormap's mid color.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("Heatmap values must be finite")
    if values.ndim == 1:
        if grid_shape is None:
            side = int(round(np.sqrt(values.size)))
            if side * side != values.size:
                raise ValueError(f"Cannot infer a square grid for {values.size} values; pass grid_shape")
            grid_shape = (side, side)
        values = values.reshape(grid_shape)
    low, high = values.min(), values.max()
    normalized = np.full(values.shape, 0.5) if high == low else (values - low) / (high - low)
    return apply_colormap(upsample_nearest(normalized, upsample), colormap)


def overlay_mask(
    image: np.ndarray,
    mask: np.ndarray,
    alpha: float = 0.5,
    color: Sequence[float] = (1.0, 0.0, 0.0),
) -> np.ndarray:
    """ Alpha-blend ``color`` over the pixels of ``mask`` (H, W); grayscale images are promoted to RGB """
    image = _as_chw(np.asarray(image, dtype=np.float32))
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    weight = alpha * np.asarray(mask, dtype=np.float32)[None]
    tint = np.asarray(color, dtype=np.float32)[:, None, None]
    return image * (1 - weight) + weight * tint
