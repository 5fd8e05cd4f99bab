"""8-bit PNG round trips for [0, 1] float images and masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Save an (H, W, 3) color image or (H, W) grayscale mask in [0, 1]."""
    arr = to_uint8(img)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG as float32 in [0, 1]; RGB unless the file is grayscale."""
    with Image.open(path) as im:
        if im.mode == "L":
            return from_uint8(np.asarray(im))
        return from_uint8(np.asarray(im.convert("RGB")))


def load_mask(path: str | Path) -> np.ndarray:
    """Load a mask PNG as (H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("L")))


def composite(fg: np.ndarray, mask: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Alpha-blend ``fg`` over ``bg``: ``mask * fg + (1 - mask) * bg``.

    ``fg`` and ``bg`` are (H, W, 3); ``mask`` is (H, W) or (H, W, 1) in
    [0, 1]. Where the mask is exactly 0 the result equals ``bg`` exactly.
    """
    fg = np.asarray(fg, dtype=np.float32)
    bg = np.asarray(bg, dtype=np.float32)
    m = np.asarray(mask, dtype=np.float32)
    if m.ndim == 2:
        m = m[..., None]
    if fg.shape != bg.shape or m.shape[:2] != fg.shape[:2]:
        raise ValueError(
            f"composite shape mismatch: fg {fg.shape}, bg {bg.shape}, mask {mask.shape}"
        )
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    return m * fg + (1.0 - m) * bg


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to size x size, preserving the [0, 1] range."""
    if img.shape[0] == size and img.shape[1] == size:
        return img.astype(np.float32)
    mode = "L" if img.ndim == 2 else "RGB"
    im = Image.fromarray(to_uint8(img), mode=mode)
    im = im.resize((size, size), Image.BILINEAR)
    return from_uint8(np.asarray(im))
