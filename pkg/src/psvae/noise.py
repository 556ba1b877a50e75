"""Heterogeneous synthetic artifact generation.

A corrupted observation is the clean image plus a sum of per-kind noise
residuals, each gated by a binary region mask. Masks are random axis-aligned
rectangles covering 15-60% of the frame and may overlap. All randomness is
drawn from explicit generators so a recorded seed reproduces the exact same
corruption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import CalibrationError, ConfigError, DomainError
from .metrics import psnr

NOISE_KINDS = ("gaussian", "poisson", "salt_pepper")

MASK_AREA_LO = 0.15
MASK_AREA_HI = 0.60


@dataclass(frozen=True)
class NoiseParams:
    """Magnitudes for the three supported noise kinds.

    ``poisson_lam`` is the photon-count scale: larger means cleaner. Set it
    to ``inf`` to disable the Poisson component.
    """

    gaussian_sigma: float = 0.12
    poisson_lam: float = 30.0
    salt_pepper_density: float = 0.08

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ConfigError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if not self.poisson_lam > 0:
            raise ConfigError(f"poisson_lam must be > 0, got {self.poisson_lam}")
        if not 0.0 <= self.salt_pepper_density <= 1.0:
            raise ConfigError(
                f"salt_pepper_density must be in [0, 1], got {self.salt_pepper_density}"
            )

    def scaled(self, factor):
        """Scale every kind's strength by ``factor`` (> 0)."""
        return NoiseParams(
            gaussian_sigma=self.gaussian_sigma * factor,
            poisson_lam=self.poisson_lam / factor,
            salt_pepper_density=min(1.0, self.salt_pepper_density * factor),
        )


@dataclass
class ArtifactComponent:
    kind: str
    params: NoiseParams
    mask: np.ndarray  # [H, W] bool
    rect: tuple = None  # (top, left, height, width) when the mask is a rectangle


@dataclass
class ArtifactModel:
    """One corruption recipe: a non-empty list of masked noise components."""

    components: list

    def __post_init__(self):
        if not self.components:
            raise ConfigError("artifact model needs at least one component")
        for comp in self.components:
            if comp.kind not in NOISE_KINDS:
                raise ConfigError(f"unknown noise kind {comp.kind!r}")


def _sample_rect(height, width, rng):
    """A rectangle whose area fraction always lands in [MASK_AREA_LO, MASK_AREA_HI]."""
    area = rng.uniform(MASK_AREA_LO, MASK_AREA_HI)
    aspect_lo = max(0.5, area)
    aspect_hi = min(2.0, 1.0 / area)
    aspect = rng.uniform(aspect_lo, aspect_hi)
    rh = int(round(math.sqrt(area * aspect) * height))
    rh = min(max(rh, 1), height)
    total = height * width
    w_lo = math.ceil(MASK_AREA_LO * total / rh)
    w_hi = math.floor(MASK_AREA_HI * total / rh)
    rw = int(round(math.sqrt(area / aspect) * width))
    rw = min(max(rw, w_lo), min(w_hi, width))
    top = int(rng.integers(0, height - rh + 1))
    left = int(rng.integers(0, width - rw + 1))
    return top, left, rh, rw


def rect_to_mask(height, width, rect):
    top, left, rh, rw = rect
    mask = np.zeros((height, width), dtype=bool)
    mask[top : top + rh, left : left + rw] = True
    return mask


def sample_rects(height, width, count, rng, full_frame=False):
    """``count`` rectangles; full-frame mode returns whole-image rectangles."""
    if count < 1:
        raise ConfigError(f"mask count must be >= 1, got {count}")
    if full_frame:
        return [(0, 0, height, width)] * count
    return [_sample_rect(height, width, rng) for _ in range(count)]


def sample_masks(height, width, count, rng, full_frame=False):
    """``count`` random rectangular region masks (or full-frame ones)."""
    return [
        rect_to_mask(height, width, r)
        for r in sample_rects(height, width, count, rng, full_frame=full_frame)
    ]


def make_artifact_model(
    height, width, params, rng, kinds=NOISE_KINDS, full_frame=False, rects=None
):
    """One masked component per requested kind.

    New rectangles are drawn from ``rng`` unless explicit ``rects`` are given
    (used when replaying a recorded corruption).
    """
    if rects is None:
        rects = sample_rects(height, width, len(kinds), rng, full_frame=full_frame)
    if len(rects) != len(kinds):
        raise ConfigError(f"need {len(kinds)} rects, got {len(rects)}")
    return ArtifactModel(
        components=[
            ArtifactComponent(
                kind=k, params=params, mask=rect_to_mask(height, width, r), rect=tuple(r)
            )
            for k, r in zip(kinds, rects)
        ]
    )


def _residual(kind, clean, params, rng):
    """Full-frame noise residual for one kind; masking happens in corrupt."""
    shape = clean.shape
    if kind == "gaussian":
        if params.gaussian_sigma == 0.0:
            return np.zeros(shape, dtype=clean.dtype)
        noise = rng.standard_normal(shape, dtype=np.float32)
        return (noise * np.float32(params.gaussian_sigma)).astype(clean.dtype)
    if kind == "poisson":
        if math.isinf(params.poisson_lam):
            return np.zeros(shape, dtype=clean.dtype)
        lam = params.poisson_lam
        counts = rng.poisson(clean.astype(np.float64) * lam)
        return (counts / lam - clean).astype(clean.dtype)
    if kind == "salt_pepper":
        d = params.salt_pepper_density
        u = rng.random((shape[0], shape[1]))
        salt = u < d / 2.0
        pepper = (u >= d / 2.0) & (u < d)
        shot = clean.copy()
        shot[salt, :] = 1.0
        shot[pepper, :] = 0.0
        return shot - clean
    raise ConfigError(f"unknown noise kind {kind!r}")


def corrupt(clean, model, rng):
    """Apply every masked component to ``clean`` and clamp to [0, 1].

    Pixels outside all masks come back bitwise unchanged. Component
    residuals are drawn in a fixed order, so a given generator state always
    produces the same observation.
    """
    clean = np.asarray(clean)
    if clean.ndim != 3:
        raise DomainError(f"expected an [H,W,C] image, got rank {clean.ndim}")
    if clean.min() < 0.0 or clean.max() > 1.0:
        raise DomainError("clean image values must lie in [0, 1]")
    obs = clean.copy()
    for comp in model.components:
        if comp.mask.shape != clean.shape[:2]:
            raise DomainError(
                f"mask shape {comp.mask.shape} does not match image {clean.shape[:2]}"
            )
        res = _residual(comp.kind, clean, comp.params, rng)
        obs = obs + res * comp.mask[:, :, None].astype(clean.dtype)
    return np.clip(obs, 0.0, 1.0)


def measure_mean_psnr(params, probe_images, seeds, kinds=NOISE_KINDS, full_frame=False):
    """Mean PSNR of corrupting each probe with a fixed per-probe seed."""
    values = []
    for img, seed in zip(probe_images, seeds):
        ss = np.random.SeedSequence(seed)
        mask_rng, noise_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
        model = make_artifact_model(
            img.shape[0], img.shape[1], params, mask_rng, kinds=kinds, full_frame=full_frame
        )
        noisy = corrupt(img, model, noise_rng)
        values.append(psnr(noisy, img, 1.0))
    return float(np.mean(values))


SCALE_LO = 2.0**-10
SCALE_HI = 2.0**10


def calibrate_to_psnr(
    target_db,
    base,
    probe_images,
    rng,
    kinds=NOISE_KINDS,
    full_frame=False,
    tol_db=0.2,
    max_iters=48,
):
    """Scale ``base`` until the probe batch's mean PSNR hits ``target_db``.

    Bisection runs on a global strength multiplier; the probe corruptions
    reuse fixed seeds so the measured curve is a deterministic, monotone
    function of the multiplier. Raises CalibrationError when the target is
    outside [5, 50] dB or cannot be bracketed within the multiplier bounds.
    """
    if not 5.0 <= target_db <= 50.0:
        raise CalibrationError(f"target {target_db} dB outside the supported [5, 50] range")
    if not probe_images:
        raise CalibrationError("calibration needs at least one probe image")
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=len(probe_images))]

    def measure(scale):
        return measure_mean_psnr(
            base.scaled(scale), probe_images, seeds, kinds=kinds, full_frame=full_frame
        )

    lo, hi = SCALE_LO, SCALE_HI
    psnr_lo, psnr_hi = measure(lo), measure(hi)  # lo = weak noise = high PSNR
    if not (psnr_hi - 0.5 <= target_db <= psnr_lo + 0.5):
        raise CalibrationError(
            f"target {target_db} dB unreachable: achievable range is "
            f"[{psnr_hi:.2f}, {psnr_lo:.2f}] dB"
        )
    scale = 1.0
    for _ in range(max_iters):
        scale = math.sqrt(lo * hi)  # geometric midpoint
        mean_db = measure(scale)
        if abs(mean_db - target_db) <= tol_db:
            return base.scaled(scale)
        if mean_db > target_db:
            lo = scale  # too clean, push noise up
        else:
            hi = scale
    raise CalibrationError(
        f"bisection did not converge to {target_db} +/- {tol_db} dB in {max_iters} steps"
    )
