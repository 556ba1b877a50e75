"""8-bit PNG image I/O with an internal [0,1] float representation.

PNG is the only supported interchange format; lossy formats would stack
their own artifacts on top of the synthesized ones.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError


def load_image(path, channels=3):
    """Read a PNG into a float32 [H,W,C] array scaled to [0,1]."""
    if not str(path).lower().endswith(".png"):
        raise ConfigError(f"only PNG inputs are supported, got {path}")
    try:
        with Image.open(path) as img:
            if channels == 1:
                img = img.convert("L")
                arr = np.asarray(img, dtype=np.float32)[:, :, None]
            else:
                img = img.convert("RGB")
                arr = np.asarray(img, dtype=np.float32)
    except UnidentifiedImageError as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path, arr):
    """Write a [H,W,C] float array in [0,1] as an 8-bit PNG."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        img = Image.fromarray(data[:, :, 0], mode="L")
    elif data.shape[2] == 3:
        img = Image.fromarray(data, mode="RGB")
    else:
        raise ConfigError(f"cannot encode {data.shape[2]}-channel image as PNG")
    img.save(path, format="PNG")


def list_images(directory):
    """Sorted paths of the PNG files directly inside ``directory``."""
    if not os.path.isdir(directory):
        raise OSError(f"not a directory: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    return [os.path.join(directory, n) for n in names]


def crop_to_grid(arr, patch_size, overlap):
    """Center-free crop down to the largest extents the patch grid accepts."""
    stride = patch_size - overlap
    h, w = arr.shape[0], arr.shape[1]
    if h < patch_size or w < patch_size:
        raise ConfigError(
            f"image {h}x{w} is smaller than the patch size {patch_size}"
        )
    new_h = patch_size + (h - patch_size) // stride * stride
    new_w = patch_size + (w - patch_size) // stride * stride
    return arr[:new_h, :new_w]
