"""Raster I/O: 8/16-bit grayscale and RGB PNG, plus PFM via the gtgen module."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UnsupportedFormat
from .gtgen import read_pfm, write_pfm

# ITU-R 601 luma weights for RGB collapse
_LUMA = np.array([0.299, 0.587, 0.114])


def load_gray(path) -> np.ndarray:
    """Load a raster as float64 grayscale (PNG 8/16-bit gray, RGB, or PFM)."""
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        return read_pfm(p).astype(np.float64)
    if p.suffix.lower() != ".png":
        raise UnsupportedFormat(f"{p.name}: expected .png or .pfm")
    img = Image.open(p)
    a = np.asarray(img)
    if a.ndim == 3:
        a = a[..., :3] @ _LUMA
    return a.astype(np.float64)


def save_png(array: np.ndarray, path) -> None:
    """Save uint8 or uint16 grayscale (or uint8 RGB) as PNG."""
    a = np.asarray(array)
    if a.dtype == np.uint16:
        Image.fromarray(a, mode="I;16").save(path)
    elif a.dtype == np.uint8:
        Image.fromarray(a).save(path)
    else:
        raise UnsupportedFormat(f"cannot save dtype {a.dtype} as PNG")


__all__ = ["load_gray", "save_png", "read_pfm", "write_pfm"]
