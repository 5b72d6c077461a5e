"""Synthetic street-view fixtures: trapezoid road masks built from a known
vanishing point, textured scenes with drawn damages, and on-disk datasets in
the VOC layout that :func:`roadpaste.dataset_io.load_dataset` reads.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset_io import CLASSES


def trapezoid_mask(height, width, vanish, bottom_left_x, bottom_right_x, top_row=None):
    """Road mask bounded by two lines through ``vanish = (x_v, y_v)``.

    The lines pass through ``(bottom_left_x, height - 1)`` and
    ``(bottom_right_x, height - 1)``. Pixel ``(r, c)`` is road when
    ``r >= top_row`` and ``c`` lies between the two lines at row ``r``.
    """
    vx, vy = vanish
    r = np.arange(height, dtype=float)[:, None]
    c = np.arange(width, dtype=float)[None, :]
    t = (r - vy) / (height - 1 - vy)
    xl = vx + (bottom_left_x - vx) * t
    xr = vx + (bottom_right_x - vx) * t
    if top_row is None:
        top_row = int(np.ceil(vy)) + 1
    return (r >= top_row) & (c >= xl) & (c <= xr) & (r > vy)


def random_trapezoid(rng, height=640, width=640):
    """Random in-frame trapezoid; returns (mask, vanishing point)."""
    vx = rng.uniform(0.3, 0.7) * width
    vy = rng.uniform(0.15, 0.5) * height
    bl = rng.uniform(0.02, 0.35) * width
    br = rng.uniform(0.65, 0.98) * width
    top = int(np.ceil(vy + rng.uniform(0.02, 0.08) * height))
    return trapezoid_mask(height, width, (vx, vy), bl, br, top), (vx, vy)


def _texture(rng, shape, base, spread):
    noise = rng.normal(0.0, spread, size=shape[:2] + (1,))
    return np.clip(np.asarray(base, dtype=float) + noise, 0, 255)


def _draw_damage(draw, rng, cls, box):
    x0, y0, x1, y1 = box
    dark = tuple(int(v) for v in rng.integers(20, 55, size=3))
    if cls == "D00":
        xs = np.linspace(x0 + 1, x1 - 1, 6) + rng.normal(0, 1.0, 6)
        pts = list(zip(np.clip(xs, x0, x1), np.linspace(y0, y1, 6)))
        draw.line(pts, fill=dark, width=2)
    elif cls == "D10":
        ys = np.linspace(y0 + 1, y1 - 1, 6) + rng.normal(0, 1.0, 6)
        pts = list(zip(np.linspace(x0, x1, 6), np.clip(ys, y0, y1)))
        draw.line(pts, fill=dark, width=2)
    elif cls == "D20":
        for t in np.linspace(0.15, 0.85, 4):
            draw.line([(x0, y0 + t * (y1 - y0)), (x1, y0 + (1 - t) * (y1 - y0))], fill=dark, width=1)
            draw.line([(x0 + t * (x1 - x0), y0), (x0 + (1 - t) * (x1 - x0), y1)], fill=dark, width=1)
    else:
        draw.ellipse([x0 + 1, y0 + 1, x1 - 1, y1 - 1], fill=dark)


def road_scene(rng, height=640, width=640, n_damages=3):
    """Textured scene with a trapezoid road and damages drawn on it.

    Returns ``(pixels, mask, vanish, damages)`` where ``damages`` is a list of
    ``(class_id, (x_min, y_min, x_max, y_max))`` with integer coordinates.
    """
    mask, vanish = random_trapezoid(rng, height, width)
    sky = _texture(rng, (height, width), (150, 170, 140), 12.0)
    road = _texture(rng, (height, width), (105, 105, 108), 14.0)
    pixels = np.where(mask[..., None], road, sky).astype(np.uint8)

    img = Image.fromarray(pixels)
    draw = ImageDraw.Draw(img)
    vy = vanish[1]
    rows = np.flatnonzero(mask.any(axis=1))
    damages = []
    tries = 0
    while len(damages) < n_damages and tries < 50 * n_damages:
        tries += 1
        r = int(rng.integers(int(rows[0] + 0.35 * (rows[-1] - rows[0])), rows[-1] + 1))
        cols = np.flatnonzero(mask[r])
        if len(cols) < 20:
            continue
        scale = (r - vy) / (height - 1 - vy)
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        bw, bh = {"D00": (14, 70), "D10": (70, 14), "D20": (55, 45), "D40": (36, 24)}[cls]
        bw = max(4, int(round(bw * scale * rng.uniform(0.8, 1.3))))
        bh = max(4, int(round(bh * scale * rng.uniform(0.8, 1.3))))
        cx = int(rng.integers(cols[0] + bw // 2, max(cols[0] + bw // 2 + 1, cols[-1] - bw // 2)))
        box = (cx - bw // 2, r - bh, cx - bw // 2 + bw, r)
        if box[0] < 0 or box[1] < 0 or box[2] > width or box[3] > height:
            continue
        if any(_overlap(box, d[1]) for d in damages):
            continue
        _draw_damage(draw, rng, cls, box)
        damages.append((cls, box))
    return np.asarray(img), mask, vanish, damages


def _overlap(a, b):
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def voc_xml(filename, width, height, objects):
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    for tag, val in (("width", width), ("height", height), ("depth", 3)):
        ET.SubElement(size, tag).text = str(val)
    for cls, box in objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = cls
        bb = ET.SubElement(obj, "bndbox")
        for tag, val in zip(("xmin", "ymin", "xmax", "ymax"), box):
            ET.SubElement(bb, tag).text = str(val)
    return ET.tostring(root, encoding="unicode")


def make_dataset(out_dir, n_images=10, seed=0, height=640, width=640, damages_per_image=3):
    """Write a synthetic VOC dataset under ``out_dir``.

    Layout: ``images/*.png``, ``masks/*.png`` (0/255), ``annotations/*.xml``.
    Returns the dataset directory path, usable directly as a manifest.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "annotations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_images):
        stem = f"road_{i:04d}"
        pixels, mask, _, damages = road_scene(rng, height, width, damages_per_image)
        Image.fromarray(pixels).save(out / "images" / f"{stem}.png")
        Image.fromarray((mask * 255).astype(np.uint8)).save(out / "masks" / f"{stem}.png")
        (out / "annotations" / f"{stem}.xml").write_text(voc_xml(f"{stem}.png", width, height, damages))
    return out
