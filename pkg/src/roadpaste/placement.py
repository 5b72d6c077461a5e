"""Per-bin location heatmaps and road-constrained placement sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import EmptyRoadMask, WriteError
from .perspective import assign_bin

GRID = 64
SIGMA = 2.0
TRUNCATE = 3.0


@dataclass
class PlacementHeatmap:
    bin: int
    grid: np.ndarray  # rows index normalized y, columns normalized x
    sigma: float = SIGMA
    sample_count: int = 0

    @property
    def size(self):
        return self.grid.shape[0]


@dataclass(frozen=True)
class PlacementSample:
    x: int
    y: int
    source: str  # "heatmap" | "uniform_fallback"


def uniform_heatmap(bin=0, grid=GRID, sigma=SIGMA):
    return PlacementHeatmap(bin, np.full((grid, grid), 1.0 / grid**2), sigma, 0)


def point_cell(u, v, grid):
    """Grid cell (row, col) of a normalized point (u = x / W, v = y / H)."""
    col = min(max(int(np.floor(u * grid)), 0), grid - 1)
    row = min(max(int(np.floor(v * grid)), 0), grid - 1)
    return row, col


def heatmap_from_points(points, bin=0, sigma=SIGMA, grid=GRID):
    """Smoothed, normalized heatmap from normalized ``(u, v)`` points."""
    if len(points) == 0:
        return uniform_heatmap(bin, grid, sigma)
    acc = np.zeros((grid, grid))
    for u, v in points:
        acc[point_cell(u, v, grid)] += 1.0
    if sigma > 0:
        acc = gaussian_filter(acc, sigma=sigma, mode="reflect", truncate=TRUNCATE)
    return PlacementHeatmap(bin, acc / acc.sum(), sigma, len(points))


def build_heatmaps(index, maps, binning, sigma=SIGMA, grid=GRID):
    """One heatmap per pitch bin from damage ground-contact points.

    The ground-contact point of a box is its bottom-center. Images without a
    perspective map are ignored; bins without points get the uniform grid.
    """
    points = {b: [] for b in range(binning.k)}
    for rec in index.records:
        pmap = maps.get(rec.image_id)
        if pmap is None:
            continue
        b = assign_bin(pmap.horizon_ratio, binning)
        for ann in index.annotations_for(rec.image_id):
            x, y = ann.bbox.bottom_center
            points[b].append((x / rec.width, y / rec.height))
    return {b: heatmap_from_points(pts, b, sigma, grid) for b, pts in points.items()}


class PlacementSampler:
    """Exact two-stage sampler: draw a grid cell, then a pixel inside it.

    With ``content_aware`` the cell law is proportional to
    ``(weight * H + (1 - weight) / G^2) * road_fraction`` and the pixel is a
    road pixel of that cell. Without it the law uses every pixel of the frame
    and the mask is not consulted (it may be None).
    """

    def __init__(self, heatmap, mask=None, content_aware=True, weight=1.0, shape=None):
        if content_aware:
            if mask is None:
                raise EmptyRoadMask("content-aware placement needs a road mask")
            grid_mask = mask.grid if hasattr(mask, "grid") else np.asarray(mask, dtype=bool)
            shape = grid_mask.shape
            if not grid_mask.any():
                raise EmptyRoadMask("road mask has no road pixels")
        elif shape is None:
            if mask is None:
                raise ValueError("frame shape required when no mask is given")
            shape = mask.shape
        height, width = shape
        g = heatmap.size
        self.width = width
        cell_r = (np.arange(height) * g) // height
        cell_c = (np.arange(width) * g) // width
        cell_id = (cell_r[:, None] * g + cell_c[None, :]).ravel()
        pixels_per_cell = np.bincount(cell_id, minlength=g * g)

        if content_aware:
            pool = np.flatnonzero(grid_mask.ravel())
        else:
            pool = np.arange(height * width)
        pool_cells = cell_id[pool]
        order = np.argsort(pool_cells, kind="stable")
        self.pool = pool[order]
        self.counts = np.bincount(pool_cells, minlength=g * g)
        self.starts = np.concatenate(([0], np.cumsum(self.counts)[:-1]))

        fraction = self.counts / np.maximum(pixels_per_cell, 1)
        prior = weight * heatmap.grid.ravel() + (1.0 - weight) / (g * g)
        law = prior * fraction
        self.source = "heatmap"
        if not law.sum() > 0:
            law = self.counts.astype(float)
            self.source = "uniform_fallback"
        self.probabilities = law / law.sum()
        cdf = np.cumsum(self.probabilities)
        cdf[-1] = 1.0
        self.cdf = cdf

    def sample_indices(self, rng, n):
        """Draw ``n`` (cell, flat pixel index) pairs."""
        cells = np.searchsorted(self.cdf, rng.random(n), side="right")
        offsets = np.floor(rng.random(n) * self.counts[cells]).astype(np.int64)
        offsets = np.minimum(offsets, self.counts[cells] - 1)
        return cells, self.pool[self.starts[cells] + offsets]

    def sample(self, rng):
        _, flat = self.sample_indices(rng, 1)
        y, x = divmod(int(flat[0]), self.width)
        return PlacementSample(x, y, self.source)


def sample_placement(heatmap, mask, rng, content_aware=True, weight=1.0, shape=None):
    return PlacementSampler(heatmap, mask, content_aware, weight, shape).sample(rng)


# anchor colors of a perceptually ordered dark-blue -> yellow ramp
_RAMP = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)


def false_color(grid, upscale=4):
    g = np.asarray(grid, dtype=float)
    span = g.max() - g.min()
    t = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    pos = t * (len(_RAMP) - 1)
    rgb = np.stack([np.interp(pos, np.arange(len(_RAMP)), _RAMP[:, ch]) for ch in range(3)], axis=-1)
    rgb = np.round(rgb).astype(np.uint8)
    return np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)


def save_heatmaps(heatmaps, out_dir):
    out = Path(out_dir)
    bins = sorted(heatmaps)
    try:
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / "heatmaps.npz",
                 bins=np.array(bins),
                 grids=np.stack([heatmaps[b].grid for b in bins]),
                 sigma=np.array([heatmaps[b].sigma for b in bins]),
                 sample_count=np.array([heatmaps[b].sample_count for b in bins]))
        paths = []
        for b in bins:
            p = out / f"heatmap_bin{b}.png"
            Image.fromarray(false_color(heatmaps[b].grid)).save(p)
            paths.append(p)
    except OSError as exc:
        raise WriteError(out, exc) from exc
    return paths


def load_heatmaps(path):
    path = Path(path)
    if path.is_dir():
        path = path / "heatmaps.npz"
    with np.load(path) as data:
        return {int(b): PlacementHeatmap(int(b), data["grids"][i].copy(), float(data["sigma"][i]),
                                         int(data["sample_count"][i]))
                for i, b in enumerate(data["bins"])}
