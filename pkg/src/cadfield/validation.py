"""Argument checks shared by the estimator wrappers and the CLI."""

import numbers

import numpy as np

from .errors import DimensionError, EmptySilhouetteError, InvalidInputError
from .masks import MaskRaster


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_images(images):
    """(V, H, W, 3) float64 array with values in [0, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DimensionError(f"expected images of shape (V, H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError("image values must be finite and inside [0, 1]")
    return arr


def check_masks(masks, shape=None):
    """List of non-empty ``MaskRaster`` sharing one size (optionally ``shape``)."""
    if isinstance(masks, (MaskRaster, np.ndarray)) and np.ndim(getattr(masks, "pixels", masks)) == 2:
        masks = [masks]
    out = [m if isinstance(m, MaskRaster) else MaskRaster(m) for m in masks]
    if not out:
        raise InvalidInputError("need at least one mask")
    sizes = {m.shape for m in out}
    if len(sizes) != 1:
        raise DimensionError(f"masks differ in size: {sorted(sizes)}")
    if shape is not None and out[0].shape != tuple(shape):
        raise DimensionError(f"mask size {out[0].shape} does not match images {tuple(shape)}")
    for i, m in enumerate(out):
        if m.empty:
            raise EmptySilhouetteError(f"mask {i} has no foreground pixels")
    return out
