"""Depth and mask PNG I/O.

Depth PNGs are 16-bit grayscale; stored value times depth_scale gives
millimeters (BOP convention, default 0.1 mm per unit). Masks are 8-bit,
255 = covered. Writes are deterministic: fixed compression settings and
no ancillary chunks, so regeneration is byte-identical.
"""

import numpy as np
from PIL import Image

from .errors import IoFailure

DEPTH_SCALE = 0.1


def write_depth_png(path, depth_m, depth_scale: float = DEPTH_SCALE):
    """Write a depth map in meters as a 16-bit PNG.

    :raises ValueError: if any depth quantizes outside the 16-bit range.
    """
    units = np.round(np.asarray(depth_m, dtype=np.float64) * (1000.0 / depth_scale))
    if units.min() < 0 or units.max() > 65535:
        raise ValueError("depth out of range for 16-bit storage at this depth_scale")
    Image.fromarray(units.astype(np.uint16)).save(path, format="PNG")


def read_depth_png(path, depth_scale: float = DEPTH_SCALE):
    """Read a 16-bit depth PNG back to meters."""
    try:
        with Image.open(path) as img:
            units = np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise IoFailure("cannot read depth png %s: %s" % (path, exc)) from exc
    return units * (depth_scale / 1000.0)


def write_mask_png(path, mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_mask_png(path):
    try:
        with Image.open(path) as img:
            values = np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise IoFailure("cannot read mask png %s: %s" % (path, exc)) from exc
    return values > 127
