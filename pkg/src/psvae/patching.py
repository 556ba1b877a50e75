"""Overlapping patch extraction and distance-weighted reassembly.

Images are cut into a regular grid of D x D patches with a fixed overlap.
Reassembly blends overlapping decoder outputs with a separable tent weight
centered on each patch, so seams between patches that passed different
decoders fade linearly instead of forming blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GridError
from .tensor import Tensor

# Keeps the tent weight strictly positive at patch borders.
BLEND_EDGE_EPS = 0.5


@dataclass(frozen=True)
class PatchGridSpec:
    """Geometry of the patch grid over one image."""

    patch_size: int
    overlap: int
    height: int
    width: int
    channels: int

    def __post_init__(self):
        d, ov = self.patch_size, self.overlap
        if d < 1:
            raise ConfigError(f"patch_size must be >= 1, got {d}")
        if not 0 <= ov < d:
            raise ConfigError(f"overlap must satisfy 0 <= overlap < patch_size, got {ov}")
        stride = d - ov
        for name, extent in (("height", self.height), ("width", self.width)):
            if extent < d:
                raise ConfigError(f"image {name} {extent} is smaller than patch size {d}")
            if (extent - d) % stride != 0:
                raise ConfigError(
                    f"image {name} {extent} minus patch size {d} is not divisible "
                    f"by stride {stride}"
                )
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")

    @property
    def stride(self):
        return self.patch_size - self.overlap

    @property
    def rows(self):
        return (self.height - self.patch_size) // self.stride + 1

    @property
    def cols(self):
        return (self.width - self.patch_size) // self.stride + 1

    @property
    def num_patches(self):
        return self.rows * self.cols

    @classmethod
    def for_image(cls, image, patch_size, overlap):
        arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        if arr.ndim == 2:
            h, w, c = arr.shape[0], arr.shape[1], 1
        else:
            h, w, c = arr.shape
        return cls(patch_size, overlap, h, w, c)


@dataclass
class PatchRecord:
    """One D x D x C patch plus its grid and pixel coordinates."""

    data: Tensor
    grid_pos: tuple  # (row, col)
    pixel_origin: tuple  # (y, x) = grid_pos * stride


def blend_weights(patch_size, dtype=np.float64):
    """Separable tent weights over one patch, peaked at the patch center."""
    center = (patch_size - 1) / 2.0
    half = patch_size / 2.0 + BLEND_EDGE_EPS
    axis = 1.0 - np.abs(np.arange(patch_size) - center) / half
    return np.outer(axis, axis).astype(dtype)


def split(image, spec):
    """Cut ``image`` into the row-major list of patches described by ``spec``."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape != (spec.height, spec.width, spec.channels):
        raise ConfigError(
            f"image shape {arr.shape} does not match grid spec "
            f"({spec.height}, {spec.width}, {spec.channels})"
        )
    d, stride = spec.patch_size, spec.stride
    records = []
    for r in range(spec.rows):
        y = r * stride
        for c in range(spec.cols):
            x = c * stride
            records.append(
                PatchRecord(
                    data=Tensor(arr[y : y + d, x : x + d, :].copy()),
                    grid_pos=(r, c),
                    pixel_origin=(y, x),
                )
            )
    return records


def assemble(patches, spec):
    """Blend a complete patch grid back into an image.

    Every output pixel is the weighted average of all covering patches,
    weighted by the tent distance to each patch center. The normalized
    weights at any pixel sum to one.
    """
    expected = {(r, c) for r in range(spec.rows) for c in range(spec.cols)}
    seen = set()
    for p in patches:
        if p.grid_pos in seen:
            raise GridError(f"duplicate patch at grid cell {p.grid_pos}")
        seen.add(p.grid_pos)
    missing = expected - seen
    if missing:
        raise GridError(f"incomplete grid: missing cell {sorted(missing)[0]}")
    extra = seen - expected
    if extra:
        raise GridError(f"patch outside grid: {sorted(extra)[0]}")

    d = spec.patch_size
    weights = blend_weights(d)
    acc = np.zeros((spec.height, spec.width, spec.channels), dtype=np.float64)
    norm = np.zeros((spec.height, spec.width), dtype=np.float64)
    out_dtype = None
    for p in patches:
        arr = p.data.data if isinstance(p.data, Tensor) else np.asarray(p.data)
        if arr.shape != (d, d, spec.channels):
            raise GridError(f"patch at {p.grid_pos} has shape {arr.shape}")
        out_dtype = arr.dtype if out_dtype is None else out_dtype
        y, x = p.pixel_origin
        acc[y : y + d, x : x + d, :] += weights[:, :, None] * arr.astype(np.float64)
        norm[y : y + d, x : x + d] += weights
    return Tensor((acc / norm[:, :, None]).astype(out_dtype))
