"""Full-reference image quality metrics: PSNR, SSIM, UQI and MS-SSIM.

All metrics accept [H,W] or [H,W,C] arrays with values on a [0, max_val]
scale and compute internally in float64. SSIM uses the standard 11x11
Gaussian window (sigma 1.5) with K1=0.01, K2=0.03; UQI is the same index
with both stabilizing constants at zero and an 8x8 uniform window; MS-SSIM
is the five-scale product with the conventional scale weights and 2x
average pooling between scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
UQI_WINDOW = 8
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_image(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"expected a 2-d or 3-d image, got rank {arr.ndim}")
    return arr


def _paired(x, y):
    a, b = _as_image(x), _as_image(y)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, y, max_val=1.0):
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    if max_val <= 0:
        raise ContractError(f"max_val must be positive, got {max_val}")
    a, b = _paired(x, y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _window_stats(img2d, window):
    """Window-weighted local mean of ``img2d`` at every valid window position."""
    views = sliding_window_view(img2d, window.shape)
    return np.tensordot(views, window, axes=([2, 3], [0, 1]))


def _similarity_maps(a2d, b2d, window, c1, c2):
    """Per-window luminance*contrast map and contrast-structure map."""
    mu_a = _window_stats(a2d, window)
    mu_b = _window_stats(b2d, window)
    e_aa = _window_stats(a2d * a2d, window)
    e_bb = _window_stats(b2d * b2d, window)
    e_ab = _window_stats(a2d * b2d, window)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b

    lum_num = 2.0 * mu_a * mu_b + c1
    lum_den = mu_a * mu_a + mu_b * mu_b + c1
    cs_num = 2.0 * cov + c2
    cs_den = var_a + var_b + c2

    if c1 > 0 and c2 > 0:
        full = (lum_num * cs_num) / (lum_den * cs_den)
        cs = cs_num / cs_den
        return full, cs

    # Zero-constant (UQI) case: follow the reference handling of vanishing
    # denominators. Both zero -> 1; flat-but-shifted windows keep the
    # luminance term only.
    full = np.ones_like(mu_a)
    lum_only = cs_den == 0
    both = lum_only & (lum_den != 0)
    full[both] = lum_num[both] / lum_den[both]
    ok = cs_den != 0
    # lum_den > 0 whenever any mean is nonzero; guard the all-zero case.
    safe = ok & (lum_den != 0)
    full[safe] = (lum_num[safe] * cs_num[safe]) / (lum_den[safe] * cs_den[safe])
    cs = np.ones_like(mu_a)
    cs[ok] = cs_num[ok] / cs_den[ok]
    return full, cs


def _check_window_fits(img, size, name):
    if img.shape[0] < size or img.shape[1] < size:
        raise ContractError(
            f"{name}: image {img.shape[0]}x{img.shape[1]} smaller than the "
            f"{size}x{size} window"
        )


def _ssim_channels(a, b, window, c1, c2):
    full_means, cs_means = [], []
    for ch in range(a.shape[2]):
        full, cs = _similarity_maps(a[:, :, ch], b[:, :, ch], window, c1, c2)
        full_means.append(full.mean())
        cs_means.append(cs.mean())
    return float(np.mean(full_means)), float(np.mean(cs_means))


def ssim(x, y, max_val=1.0):
    """Mean structural similarity over valid window positions, channel-averaged."""
    a, b = _paired(x, y)
    _check_window_fits(a, SSIM_WINDOW, "ssim")
    window = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    value, _ = _ssim_channels(a, b, window, c1, c2)
    return value


def uqi(x, y):
    """Universal quality index: SSIM with zero constants and an 8x8 uniform window."""
    a, b = _paired(x, y)
    _check_window_fits(a, UQI_WINDOW, "uqi")
    window = np.full((UQI_WINDOW, UQI_WINDOW), 1.0 / (UQI_WINDOW * UQI_WINDOW))
    value, _ = _ssim_channels(a, b, window, 0.0, 0.0)
    return value


def _downsample2x(a):
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return a.reshape(h // 2, 2, w // 2, 2, a.shape[2]).mean(axis=(1, 3))


def ms_ssim(x, y, max_val=1.0, weights=MS_SSIM_WEIGHTS):
    """Multi-scale SSIM: contrast-structure terms at the coarser scales times
    the full SSIM at the finest remaining scale, each raised to its weight."""
    a, b = _paired(x, y)
    scales = len(weights)
    min_extent = SSIM_WINDOW * 2 ** (scales - 1)
    if a.shape[0] < min_extent or a.shape[1] < min_extent:
        raise ContractError(
            f"ms_ssim: extents {a.shape[0]}x{a.shape[1]} cannot support "
            f"{scales} dyadic scales (need >= {min_extent})"
        )
    window = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    value = 1.0
    for level, weight in enumerate(weights):
        full, cs = _ssim_channels(a, b, window, c1, c2)
        term = full if level == scales - 1 else cs
        value *= max(term, 0.0) ** weight
        if level < scales - 1:
            a, b = _downsample2x(a), _downsample2x(b)
    return value


# -- batch reporting ----------------------------------------------------------


@dataclass
class MetricRow:
    image_id: str
    psnr: float
    ssim: float
    uqi: float
    ms_ssim: float  # nan when extents cannot support the multi-scale pyramid


@dataclass
class MetricReport:
    """Per-image metric rows plus their arithmetic means."""

    rows: list = field(default_factory=list)

    def add(self, row):
        self.rows.append(row)

    def _mean(self, values):
        vals = [v for v in values if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_psnr(self):
        return self._mean([r.psnr for r in self.rows])

    @property
    def mean_ssim(self):
        return self._mean([r.ssim for r in self.rows])

    @property
    def mean_uqi(self):
        return self._mean([r.uqi for r in self.rows])

    @property
    def mean_ms_ssim(self):
        return self._mean([r.ms_ssim for r in self.rows])

    def to_csv(self):
        lines = ["image_id,psnr,ssim,uqi,ms_ssim"]
        for r in self.rows:
            lines.append(f"{r.image_id},{r.psnr!r},{r.ssim!r},{r.uqi!r},{r.ms_ssim!r}")
        lines.append(
            f"mean,{self.mean_psnr!r},{self.mean_ssim!r},{self.mean_uqi!r},"
            f"{self.mean_ms_ssim!r}"
        )
        return "\n".join(lines) + "\n"

    def to_text(self):
        header = f"{'image':<24}{'psnr':>10}{'ssim':>10}{'uqi':>10}{'ms_ssim':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.image_id:<24}{r.psnr:>10.4f}{r.ssim:>10.4f}{r.uqi:>10.4f}"
                f"{r.ms_ssim:>10.4f}"
            )
        lines.append(
            f"{'mean':<24}{self.mean_psnr:>10.4f}{self.mean_ssim:>10.4f}"
            f"{self.mean_uqi:>10.4f}{self.mean_ms_ssim:>10.4f}"
        )
        return "\n".join(lines) + "\n"


def score_pair(image_id, restored, reference, max_val=1.0):
    """All four metrics for one image pair; MS-SSIM is nan if extents are short."""
    a, _ = _paired(restored, reference)
    scales = len(MS_SSIM_WEIGHTS)
    min_extent = SSIM_WINDOW * 2 ** (scales - 1)
    if a.shape[0] >= min_extent and a.shape[1] >= min_extent:
        ms = ms_ssim(restored, reference, max_val)
    else:
        ms = math.nan
    return MetricRow(
        image_id=image_id,
        psnr=psnr(restored, reference, max_val),
        ssim=ssim(restored, reference, max_val),
        uqi=uqi(restored, reference),
        ms_ssim=ms,
    )
