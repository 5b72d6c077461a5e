"""Perspective-consistent target quads, four-point homographies and bilinear
inverse warping.

Coordinates are continuous pixels: pixel ``(row r, col c)`` covers
``[c, c+1] x [r, r+1]`` and its center is ``(c + 0.5, r + 0.5)``. A patch of
size ``w x h`` therefore spans the rectangle ``(0, 0)-(w, h)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateQuad, ScaleOutOfRange, SingularSystem

SCALE_BOUNDS = (0.2, 5.0)
CORNER_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Quad:
    """Corners ordered bottom-left, bottom-right, top-right, top-left."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(4, 2)
        object.__setattr__(self, "points", pts)
        if not self.area > 0:
            raise DegenerateQuad(f"quad has non-positive area {self.area}")
        if not _is_convex(pts):
            raise DegenerateQuad("quad is self-intersecting or not convex")
        if min(pts[0, 1], pts[1, 1]) < max(pts[2, 1], pts[3, 1]):
            raise DegenerateQuad("bottom edge lies above the top edge")

    @property
    def area(self):
        x, y = self.points[:, 0], self.points[:, 1]
        # y grows downward, so the BL->BR->TR->TL order is clockwise in the usual frame
        return -0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    def bounds(self):
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return lo[0], lo[1], hi[0], hi[1]

    @property
    def bottom_width(self):
        return self.points[1, 0] - self.points[0, 0]

    @property
    def top_width(self):
        return self.points[2, 0] - self.points[3, 0]


def _is_convex(pts):
    d1 = np.roll(pts, -1, axis=0) - pts
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross > 0) or np.all(cross < 0))


def patch_quad(patch_w, patch_h):
    return Quad([(0, patch_h), (patch_w, patch_h), (patch_w, 0), (0, 0)])


def rect_quad(x, y, w, h):
    """Axis-aligned ``w x h`` rectangle whose bottom-center is ``(x, y)``."""
    return Quad([(x - w / 2, y), (x + w / 2, y), (x + w / 2, y - h), (x - w / 2, y - h)])


def target_quad(placement, patch_w, patch_h, s_src, pmap, scale_bounds=SCALE_BOUNDS):
    """Isosceles trapezoid for a patch anchored at ``placement``.

    The bottom edge is resized by the ratio of the target row's perspective
    scale to the source scale ``s_src``; the height uses the same bottom
    ratio, and the top edge uses the ratio at the resulting top row.
    ``pmap`` is anything with a ``scale(y)`` method.
    """
    if not s_src > 0:
        raise ScaleOutOfRange(f"source scale must be positive, got {s_src}")
    x, y = float(placement.x), float(placement.y)
    r_b = pmap.scale(y) / s_src
    lo, hi = scale_bounds
    if not lo <= r_b <= hi:
        raise ScaleOutOfRange(f"scale ratio {r_b:.4g} outside [{lo}, {hi}]")
    w_b = patch_w * r_b
    h = patch_h * r_b
    y_t = y - h
    w_t = patch_w * pmap.scale(y_t) / s_src
    if w_t <= 1 or h <= 1:
        raise DegenerateQuad(f"target quad too small (top width {w_t:.3g}, height {h:.3g})")
    return Quad([(x - w_b / 2, y), (x + w_b / 2, y), (x + w_t / 2, y_t), (x - w_t / 2, y_t)])


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _has_collinear_triple(pts, tol=1e-9):
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) < tol:
            return True
    return False


def apply_homography(h, pts):
    pts = np.asarray(pts, dtype=float)
    hom = np.c_[pts, np.ones(len(pts))] @ np.asarray(h).T
    return hom[:, :2] / hom[:, 2:3]


def solve_homography(src, dst):
    """Homography mapping the four ``src`` corners onto ``dst`` (H[2,2] = 1).

    Both point sets are first similarity-normalized (centroid at the origin,
    mean distance sqrt 2), the 8x8 system with the last entry fixed to 1 is
    solved in that frame, and the result is mapped back.
    """
    s = np.asarray(src.points if isinstance(src, Quad) else src, dtype=float).reshape(4, 2)
    d = np.asarray(dst.points if isinstance(dst, Quad) else dst, dtype=float).reshape(4, 2)
    ts, td = _normalizer(s), _normalizer(d)
    sn = apply_homography(ts, s)
    dn = apply_homography(td, d)
    if _has_collinear_triple(sn) or _has_collinear_triple(dn):
        raise SingularSystem("three corners are collinear")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(sn, dn)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    try:
        hn = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    h = np.linalg.inv(td) @ np.append(hn, 1.0).reshape(3, 3) @ ts
    if abs(h[2, 2]) < 1e-12:
        raise SingularSystem("homography has a vanishing normalization entry")
    h = h / h[2, 2]
    resid = np.abs(apply_homography(h, s) - d).max()
    if not resid < CORNER_TOL:
        raise SingularSystem(f"corner residual {resid:.3e} px exceeds {CORNER_TOL}")
    return h


def quad_window(quad, shape):
    """Integer window ``(x0, y0, x1, y1)`` covering ``quad``, clipped to the frame."""
    height, width = shape[:2]
    x0, y0, x1, y1 = quad.bounds()
    return (max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0),
            min(int(np.ceil(x1)), width), min(int(np.ceil(y1)), height))


def warp_patch(patch, h, dst_bounds):
    """Inverse-map every destination pixel of ``dst_bounds`` into ``patch``.

    ``dst_bounds`` is ``(x0, y0, x1, y1)`` with exclusive upper ends. Returns
    float pixels of the window and a validity mask of pixels whose preimage
    lies within the patch's pixel-center grid; invalid pixels are zero.
    """
    patch = np.asarray(patch, dtype=float)
    squeeze = patch.ndim == 2
    if squeeze:
        patch = patch[..., None]
    ph, pw, nc = patch.shape
    x0, y0, x1, y1 = dst_bounds
    ww, wh = max(x1 - x0, 0), max(y1 - y0, 0)
    out = np.zeros((wh, ww, nc))
    valid = np.zeros((wh, ww), dtype=bool)
    if ww == 0 or wh == 0:
        return (out[..., 0] if squeeze else out), valid

    hinv = np.linalg.inv(h)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    X = xs.ravel() + 0.5
    Y = ys.ravel() + 0.5
    den = hinv[2, 0] * X + hinv[2, 1] * Y + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (hinv[0, 0] * X + hinv[0, 1] * Y + hinv[0, 2]) / den - 0.5
        v = (hinv[1, 0] * X + hinv[1, 1] * Y + hinv[1, 2]) / den - 0.5
    eps = 1e-9
    ok = (den > 0) & (u >= -eps) & (u <= pw - 1 + eps) & (v >= -eps) & (v <= ph - 1 + eps)
    u = np.clip(u[ok], 0, pw - 1)
    v = np.clip(v[ok], 0, ph - 1)
    c0 = np.minimum(np.floor(u).astype(int), max(pw - 2, 0))
    r0 = np.minimum(np.floor(v).astype(int), max(ph - 2, 0))
    c1 = np.minimum(c0 + 1, pw - 1)
    r1 = np.minimum(r0 + 1, ph - 1)
    fu = (u - c0)[:, None]
    fv = (v - r0)[:, None]
    vals = ((1 - fv) * ((1 - fu) * patch[r0, c0] + fu * patch[r0, c1])
            + fv * ((1 - fu) * patch[r1, c0] + fu * patch[r1, c1]))
    flat_out = out.reshape(-1, nc)
    flat_out[ok] = vals
    valid.ravel()[ok] = True
    return (out[..., 0] if squeeze else out), valid
