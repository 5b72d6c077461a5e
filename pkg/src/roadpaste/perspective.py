"""Horizon estimation from road masks, the row-linear ground-plane scale, and
pitch binning.

Under a flat-ground pinhole camera the apparent size of a ground patch grows
linearly with its distance below the horizon row, so a single number, the
vanishing row ``y_v``, fixes the whole scale profile of an image. The
normalized horizon ratio ``h = y_v / H`` then serves as a proxy for camera
pitch when grouping images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoRoad, TooFewImages

MIN_ROAD_PIXELS = 500
PARALLEL_TOL = 1e-3
FALLBACK_MARGIN = 0.05
TRIM_K = 2.5
TRIM_ROUNDS = 3


@dataclass(frozen=True)
class VanishingEstimate:
    y_v: float
    confidence: str  # "fitted" | "fallback"
    inliers_left: int = 0
    inliers_right: int = 0


@dataclass(frozen=True)
class PerspectiveMap:
    y_v: float
    height: int
    width: int

    def __post_init__(self):
        if not self.y_ref > self.y_v:
            raise ValueError(f"vanishing row {self.y_v} must lie above the reference row {self.y_ref}")

    @property
    def y_ref(self):
        return self.height - 1

    @property
    def horizon_ratio(self):
        return self.y_v / self.height

    def scale(self, y):
        return perspective_scale(self, y)

    @classmethod
    def from_estimate(cls, estimate, height, width):
        return cls(float(estimate.y_v), int(height), int(width))


@dataclass(frozen=True)
class PitchBinning:
    edges: tuple

    @property
    def k(self):
        return len(self.edges) + 1

    def assign(self, h):
        return assign_bin(h, self)


def boundary_points(grid):
    """Left/right road boundary samples as (rows, x_left, x_right).

    Boundaries are placed on the pixel edge (half a column outside the
    outermost road pixel). Rows whose extreme road pixel touches the frame are
    dropped on that side, since the frame edge is not a road edge.
    """
    rows = np.flatnonzero(grid.any(axis=1))
    sub = grid[rows]
    w = grid.shape[1]
    left = np.argmax(sub, axis=1)
    right = w - 1 - np.argmax(sub[:, ::-1], axis=1)
    keep_l = left > 0
    keep_r = right < w - 1
    return (rows[keep_l], left[keep_l] - 0.5), (rows[keep_r], right[keep_r] + 0.5)


def trimmed_line_fit(y, x, rounds=TRIM_ROUNDS, k=TRIM_K):
    """Fit ``x = a*y + b`` by least squares with MAD-based trimming.

    Each round refits on the points whose residual lies within ``k`` median
    absolute deviations of the median residual of the previous fit.
    Returns (a, b, number of inliers) or None with fewer than two points.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    keep = np.ones(len(y), dtype=bool)
    if len(y) < 2:
        return None
    a, b = np.polyfit(y, x, 1)
    for _ in range(rounds):
        r = x - (a * y + b)
        dev = np.abs(r - np.median(r))
        new_keep = dev <= max(k * np.median(dev), 1e-9)
        if new_keep.sum() < 2 or np.ptp(y[new_keep]) == 0:
            break
        keep = new_keep
        a, b = np.polyfit(y[keep], x[keep], 1)
    return float(a), float(b), int(keep.sum())


def estimate_vanishing_row(mask, min_road_pixels=MIN_ROAD_PIXELS):
    grid = mask.grid if hasattr(mask, "grid") else np.asarray(mask, dtype=bool)
    height = grid.shape[0]
    count = int(grid.sum())
    if count < min_road_pixels:
        raise NoRoad(f"mask has {count} road pixels, need {min_road_pixels}")
    top = int(np.flatnonzero(grid.any(axis=1))[0])
    fallback = VanishingEstimate(top - FALLBACK_MARGIN * height, "fallback")

    (yl, xl), (yr, xr) = boundary_points(grid)
    if len(yl) < 2 or len(yr) < 2 or np.ptp(yl) == 0 or np.ptp(yr) == 0:
        return fallback
    left = trimmed_line_fit(yl, xl)
    right = trimmed_line_fit(yr, xr)
    if left is None or right is None:
        return fallback
    (al, bl, nl), (ar, br, nr) = left, right
    if abs(al - ar) < PARALLEL_TOL:
        return VanishingEstimate(fallback.y_v, "fallback", nl, nr)
    y_v = (br - bl) / (al - ar)
    if y_v > top or y_v >= height - 1:
        return VanishingEstimate(fallback.y_v, "fallback", nl, nr)
    return VanishingEstimate(float(y_v), "fitted", nl, nr)


def perspective_scale(pmap, y):
    """Row scale ``max(0, (y - y_v) / (y_ref - y_v))``; accepts scalars or arrays."""
    s = (np.asarray(y, dtype=float) - pmap.y_v) / (pmap.y_ref - pmap.y_v)
    s = np.maximum(s, 0.0)
    return float(s) if s.ndim == 0 else s


def build_pitch_bins(ratios, k=4):
    ratios = np.clip(np.asarray(ratios, dtype=float), 0.0, 1.0)
    if k < 1:
        raise ValueError("need at least one bin")
    if len(ratios) < k:
        raise TooFewImages(f"{len(ratios)} images cannot fill {k} bins")
    if k == 1:
        return PitchBinning(())
    qs = np.arange(1, k) / k
    return PitchBinning(tuple(float(e) for e in np.quantile(ratios, qs, method="linear")))


def assign_bin(h, binning):
    h = min(max(float(h), 0.0), 1.0)
    return int(np.searchsorted(np.asarray(binning.edges, dtype=float), h, side="right"))
