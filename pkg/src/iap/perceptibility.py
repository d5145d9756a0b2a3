"""Human-visual-system weighting: sensitivity map and perceptual distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .localization import PatchRegion


@dataclass
class SensitivityMap:
    values: np.ndarray  # (H, W) float64, each entry in (0, 1/lam]
    lam: float
    window_radius: int


def _directional_std(x: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Channel-averaged population std over a centred 1-D window along ``axis``.

    Sums are accumulated tap by tap in a fixed order so the result is
    reproducible bit for bit by a scalar loop.
    """
    h, w, c = x.shape
    n = 2 * radius + 1
    pad = [(0, 0)] * 3
    pad[axis] = (radius, radius)
    xp = np.pad(x, pad, mode="edge")
    length = x.shape[axis]
    taps = [np.take(xp, np.arange(k, k + length), axis=axis) for k in range(n)]
    total = taps[0].copy()
    for t in taps[1:]:
        total = total + t
    mean = total / n
    d = taps[0] - mean
    sq = d * d
    for t in taps[1:]:
        d = t - mean
        sq = sq + d * d
    std = np.sqrt(sq / n)
    acc = std[..., 0].copy()
    for ch in range(1, c):
        acc = acc + std[..., ch]
    return acc / c


def sensitivity_map(image: np.ndarray, lam: float = 1e-4, window_radius: int = 1) -> SensitivityMap:
    """Per-pixel sensitivity ``1 / (sqrt(min(std_x, std_y)) + lam)``.

    ``std_x`` (``std_y``) is the channel mean of the standard deviation over a
    horizontal (vertical) window of ``2*window_radius + 1`` pixels, with edge
    replication at the borders. Flat regions and axis-aligned edges map to the
    maximum ``1/lam``; textured regions map to small values.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected an (H,W,C) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite pixels")
    sx = _directional_std(x, window_radius, axis=1)
    sy = _directional_std(x, window_radius, axis=0)
    sigma = np.sqrt(np.minimum(sx, sy))
    return SensitivityMap(1.0 / (sigma + lam), lam, window_radius)


def _check(original: np.ndarray, adversarial: np.ndarray, region: PatchRegion, sens: SensitivityMap):
    if original.shape != adversarial.shape:
        raise ValueError(f"image shapes differ: {original.shape} vs {adversarial.shape}")
    if region.mask.shape != original.shape[:2] or sens.values.shape != original.shape[:2]:
        raise ValueError(
            f"region {region.mask.shape} / sensitivity {sens.values.shape} do not cover image {original.shape[:2]}"
        )


def perceptual_distance(original, adversarial, region: PatchRegion, sens: SensitivityMap) -> float:
    """Sensitivity-weighted mean absolute difference over the patch region.

    The per-pixel difference is the mean over channels; the sum is normalised
    by the patch area (``h*w`` for rectangles).
    """
    x = np.asarray(original, dtype=np.float64)
    xa = np.asarray(adversarial, dtype=np.float64)
    _check(x, xa, region, sens)
    diff = np.abs(x - xa).mean(axis=-1)
    return float((sens.values * diff)[region.mask].sum() / region.area)


def perceptual_distance_gradient(original, adversarial, region: PatchRegion, sens: SensitivityMap) -> np.ndarray:
    """Subgradient of :func:`perceptual_distance` w.r.t. the adversarial pixels (``sign(0) = 0``)."""
    x = np.asarray(original, dtype=np.float64)
    xa = np.asarray(adversarial, dtype=np.float64)
    _check(x, xa, region, sens)
    scale = np.where(region.mask, sens.values, 0.0) / (region.area * x.shape[-1])
    return (scale[..., None] * np.sign(xa - x)).astype(np.float32)
