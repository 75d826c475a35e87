"""Image loading, square preprocessing and deterministic PNG output.

All arrays cross this boundary as float32 RGB in [0, 1], shape (H, W, 3).
PNG writes carry no metadata so repeated runs produce identical bytes.
"""

from __future__ import annotations

import os
from typing import Union

import numpy as np
from PIL import Image

ImageLike = Union[str, os.PathLike, np.ndarray]


def load_image(path: Union[str, os.PathLike]) -> np.ndarray:
    """Read an image file as float RGB, alpha-compositing RGBA inputs over
    a white background."""
    arr, _ = _decode(path)
    return arr


def _decode(path) -> tuple[np.ndarray, bool]:
    """Decode to float RGB; reports whether an alpha channel was
    composited over white."""
    with Image.open(path) as im:
        had_alpha = im.mode in ("RGBA", "LA", "PA") or (
            im.mode == "P" and "transparency" in im.info
        )
        if had_alpha:
            rgba = im.convert("RGBA")
            bg = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
            im = Image.alpha_composite(bg, rgba).convert("RGB")
        else:
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr, had_alpha


def to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def to_float(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def prepare_image(source: ImageLike, resolution: int) -> tuple[np.ndarray, dict]:
    """Load, square-pad and resize an input for the diffusion backend.

    Non-square images are centered on a white square canvas before the
    resize; the returned record describes what was done so runs can log it.

    Returns:
        (image, record) with image float32 (resolution, resolution, 3).
    """
    if resolution < 8:
        raise ValueError(f"backend resolution too small: {resolution}")
    if isinstance(source, np.ndarray):
        img = to_float(source)
        origin = "array"
        had_alpha = False
    else:
        img, had_alpha = _decode(source)
        origin = str(source)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    side = max(h, w)
    record = {
        "source": origin,
        "original_size": [int(w), int(h)],
        "alpha_composited_over_white": bool(had_alpha),
        "padded_to_square": side != min(h, w),
        "resolution": int(resolution),
    }
    if side != h or side != w:
        canvas = np.ones((side, side, 3), dtype=np.float32)
        top = (side - h) // 2
        left = (side - w) // 2
        canvas[top : top + h, left : left + w] = img
        img = canvas
    if side != resolution:
        pil = Image.fromarray(to_uint8(img))
        pil = pil.resize((resolution, resolution), Image.BICUBIC)
        img = np.asarray(pil, dtype=np.float32) / 255.0
    return img, record


def save_png(path: Union[str, os.PathLike], img: np.ndarray) -> None:
    """Write RGB pixels as PNG with fixed encoder settings and no
    ancillary chunks, so identical arrays give identical files."""
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", compress_level=6)


def save_gray_png(path: Union[str, os.PathLike], img: np.ndarray) -> None:
    """Single-channel variant of save_png (used for masks)."""
    arr = img
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) raster, got shape {arr.shape}")
    Image.fromarray(arr, mode="L").save(path, format="PNG", compress_level=6)
