"""Binary silhouette rasters and 8-bit image I/O."""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DimensionError, FormatError


@dataclass(eq=False)
class MaskRaster:
    """Binary silhouette; ``pixels`` is a (H, W) bool array, row 0 at the top."""

    pixels: np.ndarray
    normalized: bool = False
    warning: str = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels).astype(bool)
        if self.pixels.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {self.pixels.shape}")

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def empty(self):
        return not self.pixels.any()

    @property
    def bbox(self):
        """(row0, col0, row1, col1) with exclusive ends, or None when empty."""
        rows = np.flatnonzero(self.pixels.any(axis=1))
        if len(rows) == 0:
            return None
        cols = np.flatnonzero(self.pixels.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1

    def __eq__(self, other):
        return isinstance(other, MaskRaster) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def read_mask(path):
    """8-bit single-channel raster; anything >= 128 is foreground."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    arr = np.asarray(img.convert("L"))
    return MaskRaster(arr >= 128)


def write_mask(path, mask):
    pixels = mask.pixels if isinstance(mask, MaskRaster) else np.asarray(mask, dtype=bool)
    Image.fromarray(pixels.astype(np.uint8) * 255, mode="L").save(path)


def read_image(path):
    """8-bit RGB raster -> float64 (H, W, 3) in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, image):
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def luminance_matte(image, threshold=0.02):
    """Foreground where the pixel is brighter than ``threshold`` (black-background inputs)."""
    image = np.asarray(image, dtype=np.float64)
    lum = image @ np.array([0.299, 0.587, 0.114])
    return MaskRaster(lum > threshold)


def dilate(pixels, radius):
    """Binary dilation with a square structuring element."""
    pixels = np.asarray(pixels, dtype=bool)
    radius = int(radius)
    if radius <= 0:
        return pixels.copy()
    h, w = pixels.shape
    padded = np.pad(pixels, radius)
    out = np.zeros_like(pixels)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy:dy + h, dx:dx + w]
    return out
