"""Patch masks and the perturbation-priority anchor search."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SHAPES = ("rect", "circle")


class RegionError(ValueError):
    pass


@dataclass
class PatchRegion:
    """Binary patch mask plus the anchor (top-left corner of its bounding box)."""

    anchor: tuple[int, int]
    w: int
    h: int
    mask: np.ndarray  # (H, W) bool
    shape: str = "rect"

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def bbox(self) -> tuple[slice, slice]:
        i, j = self.anchor
        return slice(i, i + self.h), slice(j, j + self.w)

    def contains(self, row: int, col: int) -> bool:
        return bool(self.mask[row, col])


def disk_template(diameter: int) -> np.ndarray:
    """Pixels whose centres lie within the inscribed circle of a ``diameter`` square."""
    c = diameter / 2.0
    yy, xx = np.mgrid[0:diameter, 0:diameter] + 0.5
    return (yy - c) ** 2 + (xx - c) ** 2 <= c * c


def _template(w: int, h: int, shape: str) -> np.ndarray:
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        if w != h:
            raise RegionError(f"circle needs w == h (the diameter), got {w}x{h}")
        return disk_template(w)
    raise RegionError(f"unknown patch shape {shape!r}; expected one of {SHAPES}")


def make_mask(anchor, w: int, h: int, image_shape, shape: str = "rect") -> PatchRegion:
    """Place a ``w`` x ``h`` patch (rect, or inscribed disk) with its top-left corner at ``anchor``."""
    i, j = (int(a) for a in anchor)
    H, W = image_shape[:2]
    if w < 1 or h < 1:
        raise RegionError(f"patch must be at least 1x1, got {w}x{h}")
    if not (0 <= i <= H - h and 0 <= j <= W - w):
        raise RegionError(f"{h}x{w} patch at ({i}, {j}) does not fit in a {H}x{W} image")
    mask = np.zeros((H, W), dtype=bool)
    mask[i : i + h, j : j + w] = _template(w, h, shape)
    return PatchRegion((i, j), w, h, mask, shape)


def empty_region(image_shape) -> PatchRegion:
    return PatchRegion((0, 0), 0, 0, np.zeros(image_shape[:2], dtype=bool), "rect")


def patch_side(fraction: float, image_shape) -> int:
    """Closest integer side of a square covering ``fraction`` of the image area."""
    H, W = image_shape[:2]
    side = int(math.floor(math.sqrt(fraction * H * W) + 0.5))
    return max(1, min(side, H, W))


@dataclass
class PriorityField:
    ratio: np.ndarray  # (H, W) localization / sensitivity
    window_scores: np.ndarray  # (H-h+1, W-w+1) float32
    w: int
    h: int
    shape: str = "rect"


def summed_area_table(values: np.ndarray) -> np.ndarray:
    """Integral image with a leading zero row and column (float64)."""
    sat = np.zeros((values.shape[0] + 1, values.shape[1] + 1), dtype=np.float64)
    sat[1:, 1:] = np.asarray(values, dtype=np.float64).cumsum(axis=0).cumsum(axis=1)
    return sat


def priority_field(loc_map, sens, w: int, h: int, shape: str = "rect") -> PriorityField:
    """Window sums of ``J / Sens`` for every anchor of a ``w`` x ``h`` patch.

    Rectangles use a summed-area table; circles sum the masked disk directly.
    ``loc_map``/``sens`` may be map objects or plain (H, W) arrays.
    """
    J = np.asarray(getattr(loc_map, "upsampled", loc_map), dtype=np.float64)
    S = np.asarray(getattr(sens, "values", sens), dtype=np.float64)
    if J.shape != S.shape:
        raise RegionError(f"localization map {J.shape} and sensitivity map {S.shape} differ in shape")
    H, W = J.shape
    if w > W or h > H or w < 1 or h < 1:
        raise RegionError(f"{h}x{w} patch does not fit in a {H}x{W} image")
    ratio = J / S
    if shape == "rect":
        sat = summed_area_table(ratio)
        scores = sat[h:, w:] - sat[:-h, w:] - sat[h:, :-w] + sat[:-h, :-w]
    else:
        template = _template(w, h, shape)
        windows = np.lib.stride_tricks.sliding_window_view(ratio, (h, w))
        scores = np.where(template, windows, 0.0).sum(axis=(2, 3))
    return PriorityField(ratio, scores.astype(np.float32), w, h, shape)


def find_optimal_location(field: PriorityField, stride: int = 1) -> tuple[int, int]:
    """Highest-scoring anchor on the stride grid; ties go to the smallest row, then column."""
    if stride < 1:
        raise RegionError("stride must be >= 1")
    grid = field.window_scores[::stride, ::stride]
    if grid.size == 0:
        raise RegionError("no candidate anchors")
    r, c = divmod(int(np.argmax(grid)), grid.shape[1])
    return r * stride, c * stride
