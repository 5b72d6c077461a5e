"""End-to-end damage injection.

The four ablation presets map onto configuration toggles:

=========  ======  =======  ===========  ===============
preset     inject  content  perspective  blend
=========  ======  =======  ===========  ===============
baseline   no      no       no           (none)
paste      yes     no       no           alpha
content    yes     yes      no           alpha
ours       yes     yes      yes          poisson_import
=========  ======  =======  ===========  ===============

Every image gets a private random stream seeded by
``splitmix64(seed XOR fnv1a64(image_id))`` so results do not depend on worker
count or scheduling. ``fnv1a64`` is the 64-bit FNV-1a hash of the UTF-8
image_id (offset basis 0xCBF29CE484222325, prime 0x100000001B3), and
``splitmix64`` adds 0x9E3779B97F4A7C15 and then avalanches with the
multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB (shifts 30, 27, 31).
"""

from __future__ import annotations

import json
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataset_io
from .blend import alpha_paste, clip_to_road, place_window, poisson_blend
from .damage_bank import extract_bank, sample_instance, sample_pooled
from .dataset_io import CLASSES, Annotation, DatasetIndex, ImageRecord
from .errors import (
    DegenerateQuad,
    EmptyRoadMask,
    MaskDimMismatch,
    MaskReadError,
    NoRoad,
    NothingOnRoad,
    ScaleOutOfRange,
    SingularSystem,
    SolverDiverged,
    WriteError,
)
from .perspective import PerspectiveMap, assign_bin, build_pitch_bins, estimate_vanishing_row
from .placement import PlacementSample, PlacementSampler, build_heatmaps, uniform_heatmap
from .warp import patch_quad, quad_window, solve_homography, target_quad, warp_patch

log = logging.getLogger(__name__)

BLEND_MODES = ("poisson_import", "poisson_mixed", "alpha")
ABLATIONS = {
    "baseline": dict(inject=False, content_aware=False, perspective_aware=False, blend_mode="alpha"),
    "paste": dict(inject=True, content_aware=False, perspective_aware=False, blend_mode="alpha"),
    "content": dict(inject=True, content_aware=True, perspective_aware=False, blend_mode="alpha"),
    "ours": dict(inject=True, content_aware=True, perspective_aware=True, blend_mode="poisson_import"),
}
REJECT_REASONS = ("NothingOnRoad", "DegenerateQuad", "ScaleOutOfRange", "SingularSystem",
                  "SolverDiverged", "overlap", "min_area")
_ATTEMPT_ERRORS = (NothingOnRoad, DegenerateQuad, ScaleOutOfRange, SingularSystem, SolverDiverged)

MASK64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def stream_seed(seed, image_id):
    return splitmix64((int(seed) & MASK64) ^ fnv1a64(image_id))


def image_rng(seed, image_id):
    return np.random.default_rng(stream_seed(seed, image_id))


@dataclass(frozen=True)
class AugmentationConfig:
    seed: int = 0
    inject: bool = True
    content_aware: bool = True
    perspective_aware: bool = True
    injections_per_image: int = 1
    max_attempts_per_injection: int = 10
    blend_mode: str = "poisson_import"
    overlap_iou_max: float = 0.3
    min_injected_area_px: float = 64.0
    scale_min: float = 0.2
    scale_max: float = 5.0
    heatmap_weight: float = 1.0
    bins: int = 4
    sigma: float = 2.0
    grid: int = 64
    min_scale: float = 0.05
    min_road_pixels: int = 500
    class_filter: str | None = None

    def __post_init__(self):
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if (self.content_aware or self.perspective_aware) and not self.inject:
            raise ValueError("content/perspective awareness requires inject")
        if self.perspective_aware and not self.content_aware:
            raise ValueError("perspective awareness requires content awareness")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"blend_mode must be one of {BLEND_MODES}")
        if self.injections_per_image < 0 or self.max_attempts_per_injection < 1:
            raise ValueError("injections_per_image >= 0 and max_attempts_per_injection >= 1 required")
        if not 0 <= self.overlap_iou_max <= 1:
            raise ValueError("overlap_iou_max must lie in [0, 1]")
        if self.min_injected_area_px < 0:
            raise ValueError("min_injected_area_px must be >= 0")
        if not 0 < self.scale_min <= 1 <= self.scale_max:
            raise ValueError("scale bounds must satisfy 0 < scale_min <= 1 <= scale_max")
        if not 0 <= self.heatmap_weight <= 1:
            raise ValueError("heatmap_weight must lie in [0, 1]")
        if self.bins < 1 or self.grid < 1 or self.sigma < 0:
            raise ValueError("bins >= 1, grid >= 1 and sigma >= 0 required")
        if not 0 <= self.min_scale < 1:
            raise ValueError("min_scale must lie in [0, 1)")
        if self.class_filter is not None and self.class_filter not in CLASSES:
            raise ValueError(f"class_filter must be one of {CLASSES}")

    @classmethod
    def from_ablation(cls, name, **overrides):
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return cls(**{**ABLATIONS[name], **overrides})

    def with_updates(self, **kw):
        return replace(self, **kw)

    @property
    def needs_masks(self):
        return self.inject and (self.content_aware or self.perspective_aware)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class MaskStore:
    """Lazy, thread-safe cache of road masks keyed by image_id.

    ``loader(record)`` defaults to reading ``record.mask_path``; ``loads``
    counts actual reads so callers can audit that masks were never touched.
    """

    def __init__(self, loader=None):
        self.loader = loader or default_mask_loader
        self.loads = 0
        self._cache = {}
        self._lock = threading.Lock()

    def get(self, record):
        with self._lock:
            if record.image_id in self._cache:
                return self._cache[record.image_id]
        mask = self.loader(record)
        with self._lock:
            self.loads += 1
            self._cache[record.image_id] = mask
        return mask


def default_mask_loader(record):
    if record.mask_path is None:
        raise MaskReadError(f"{record.image_id}: no road mask file")
    return dataset_io.load_mask(record.mask_path, (record.height, record.width))


@dataclass
class Artifacts:
    """Precomputed, read-only inputs shared by every image of a run."""

    bank: object
    maps: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)
    binning: object = None
    heatmaps: dict | None = None
    failures: dict = field(default_factory=dict)

    def summary(self):
        return {
            "bank_size": len(self.bank) if self.bank is not None else 0,
            "bank_groups": {f"{b}/{c}": n for (b, c), n in self.bank.counts().items()} if self.bank else {},
            "bank_skipped": dict(sorted(self.bank.skipped.items())) if self.bank else {},
            "bin_edges": list(self.binning.edges) if self.binning is not None else None,
            "map_failures": dict(sorted(self.failures.items())),
        }


def estimate_maps(index, masks, min_road_pixels=500):
    """Vanishing estimates and perspective maps for every image with a usable mask."""
    estimates, maps, failures = {}, {}, {}
    for rec in index.records:
        try:
            est = estimate_vanishing_row(masks.get(rec), min_road_pixels)
        except (NoRoad, MaskReadError, MaskDimMismatch) as exc:
            failures[rec.image_id] = type(exc).__name__
            continue
        estimates[rec.image_id] = est
        maps[rec.image_id] = PerspectiveMap.from_estimate(est, rec.height, rec.width)
    return estimates, maps, failures


def prepare_artifacts(index, config, masks=None):
    """Build bank, and for perspective mode maps, bins and heatmaps."""
    masks = masks if isinstance(masks, MaskStore) else MaskStore(masks)
    if not config.inject:
        return Artifacts(bank=None)
    if not config.perspective_aware:
        return Artifacts(bank=extract_bank(index, min_scale=config.min_scale))
    estimates, maps, failures = estimate_maps(index, masks, config.min_road_pixels)
    ratios = [maps[i].horizon_ratio for i in sorted(maps)]
    binning = build_pitch_bins(ratios, config.bins)
    bank = extract_bank(index, maps, binning, config.min_scale)
    heatmaps = build_heatmaps(index, maps, binning, config.sigma, config.grid)
    return Artifacts(bank, maps, estimates, binning, heatmaps, failures)


@dataclass
class ImageReport:
    image_id: str
    status: str = "ok"
    attempted: int = 0
    accepted: int = 0
    failed_injections: int = 0
    rejected: Counter = field(default_factory=Counter)
    bin: int | None = None
    bin_fallbacks: int = 0
    placement_fallbacks: int = 0
    injections: list = field(default_factory=list)

    @property
    def rejected_total(self):
        return sum(self.rejected.values())

    def to_dict(self):
        d = asdict(self)
        d["rejected"] = dict(sorted(self.rejected.items()))
        return d


def _unwarped_window(patch, x, y, shape):
    """Integer paste with bottom-center at pixel (x, y); returns (values, valid, origin)."""
    ph, pw = patch.shape[:2]
    height, width = shape
    x0, y0 = x - pw // 2, y + 1 - ph
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x0 + pw, width), min(y0 + ph, height)
    if cx0 >= cx1 or cy0 >= cy1:
        raise NothingOnRoad("patch falls outside the frame")
    vals = patch[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0].astype(float)
    return vals, np.ones(vals.shape[:2], dtype=bool), (cx0, cy0)


def _inject_once(pixels, existing, mask, pmap, img_bin, sampler, bank, config, rng, report):
    if config.perspective_aware:
        draw = sample_instance(bank, img_bin, rng, config.class_filter)
    else:
        draw = sample_pooled(bank, rng, config.class_filter)
    inst = draw.instance
    place = sampler.sample(rng)
    shape = pixels.shape[:2]

    if config.perspective_aware:
        # anchor on the bottom edge of the sampled pixel, horizontally centred on it
        anchor = PlacementSample(place.x + 0.5, place.y + 1.0, place.source)
        quad = target_quad(anchor, inst.patch_w, inst.patch_h, inst.s_src, pmap,
                           (config.scale_min, config.scale_max))
        hom = solve_homography(patch_quad(inst.patch_w, inst.patch_h), quad)
        x0, y0, x1, y1 = quad_window(quad, shape)
        vals, valid = warp_patch(inst.patch, hom, (x0, y0, x1, y1))
        origin = (x0, y0)
    else:
        vals, valid, origin = _unwarped_window(inst.patch, place.x, place.y, shape)
        quad = None
    if not valid.any():
        raise NothingOnRoad("warp produced no valid pixel")

    source = place_window(vals, origin, shape)
    source_valid = place_window(valid, origin, shape, fill=False)
    region = clip_to_road(source_valid, mask if config.content_aware else None, shape=shape)
    bbox = region.bbox()
    if bbox.area < config.min_injected_area_px:
        return None, "min_area"
    if any(bbox.iou(a.bbox) > config.overlap_iou_max for a in existing):
        return None, "overlap"

    if config.blend_mode == "alpha":
        out = alpha_paste(pixels, source, region)
    else:
        mode = "import" if config.blend_mode == "poisson_import" else "mixed"
        out = poisson_blend(pixels, source, region, mode, source_valid)
    info = {
        "instance_id": inst.instance_id,
        "class_id": inst.class_id,
        "instance_bin": inst.bin,
        "draw": draw.provenance,
        "placement": [int(place.x), int(place.y)],
        "placement_source": place.source,
        "warped": quad is not None,
        "quad": quad.points.tolist() if quad is not None else None,
        "bbox": list(bbox.as_tuple()),
        "omega_size": region.size,
    }
    if draw.fallback:
        report.bin_fallbacks += 1
    if place.source == "uniform_fallback":
        report.placement_fallbacks += 1
    return (out, Annotation(report.image_id, inst.class_id, bbox, "injected"), info), None


def augment_image(record, annotations, mask, pmap, bank, heatmaps, binning, config, rng):
    """Inject damages into one image.

    Returns ``(pixels, annotations, ImageReport)``; ``annotations`` holds the
    originals unchanged followed by the injected ones.
    """
    report = ImageReport(record.image_id)
    anns = list(annotations)
    pixels = record.pixels
    if not config.inject or config.injections_per_image == 0:
        return pixels.copy(), anns, report

    shape = pixels.shape[:2]
    img_bin = None
    if config.perspective_aware:
        if pmap is None:
            report.status = "passthrough:no_perspective_map"
            return pixels.copy(), anns, report
        img_bin = assign_bin(pmap.horizon_ratio, binning)
        report.bin = img_bin
        heatmap = heatmaps[img_bin]
    else:
        heatmap = uniform_heatmap(0, config.grid, config.sigma)
    try:
        sampler = PlacementSampler(heatmap, mask if config.content_aware else None,
                                   config.content_aware, config.heatmap_weight, shape=shape)
    except EmptyRoadMask:
        report.status = "passthrough:EmptyRoadMask"
        return pixels.copy(), anns, report

    for _ in range(config.injections_per_image):
        done = False
        for _ in range(config.max_attempts_per_injection):
            report.attempted += 1
            try:
                result, reason = _inject_once(pixels, anns, mask, pmap, img_bin, sampler, bank,
                                              config, rng, report)
            except _ATTEMPT_ERRORS as exc:
                result, reason = None, type(exc).__name__
            if result is None:
                report.rejected[reason] += 1
                continue
            pixels, ann, info = result
            anns.append(ann)
            report.injections.append(info)
            report.accepted += 1
            done = True
            break
        if not done:
            report.failed_injections += 1
    return pixels, anns, report


@dataclass
class AugmentationReport:
    config: dict
    images: list
    artifacts: dict = field(default_factory=dict)

    @property
    def attempted(self):
        return sum(r.attempted for r in self.images)

    @property
    def accepted(self):
        return sum(r.accepted for r in self.images)

    def rejected(self):
        c = Counter()
        for r in self.images:
            c.update(r.rejected)
        return c

    def totals(self):
        by_class, by_bin = Counter(), Counter()
        for r in self.images:
            for inj in r.injections:
                by_class[inj["class_id"]] += 1
                by_bin[str(r.bin)] += 1
        rej = self.rejected()
        return {
            "images": len(self.images),
            "attempted": self.attempted,
            "accepted": self.accepted,
            "rejected": {k: rej.get(k, 0) for k in REJECT_REASONS},
            "failed_injections": sum(r.failed_injections for r in self.images),
            "passthrough": sum(r.status != "ok" for r in self.images),
            "injections_by_class": {c: by_class.get(c, 0) for c in CLASSES},
            "injections_by_bin": dict(sorted(by_bin.items())),
            "bin_fallbacks": sum(r.bin_fallbacks for r in self.images),
            "placement_fallbacks": sum(r.placement_fallbacks for r in self.images),
        }

    def to_dict(self):
        return {
            "seed": self.config.get("seed"),
            "config": self.config,
            "totals": self.totals(),
            "artifacts": self.artifacts,
            "images": [r.to_dict() for r in self.images],
        }

    def write(self, path):
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        except OSError as exc:
            raise WriteError(path, exc) from exc
        return path


def augment_dataset(index, masks=None, config=None, out_dir=None, jobs=1, artifacts=None):
    """Augment every image of ``index`` once.

    ``masks`` is a :class:`MaskStore`, a loader ``record -> RoadMask`` or None
    (read each record's mask file). Masks are only touched when the config is
    content- or perspective-aware. When ``out_dir`` is given the images,
    ``annotations.json`` and ``report.json`` are written there.
    Returns the augmented :class:`DatasetIndex` and the report.
    """
    config = config or AugmentationConfig()
    masks = masks if isinstance(masks, MaskStore) else MaskStore(masks)
    if artifacts is None:
        artifacts = prepare_artifacts(index, config, masks)

    def work(record):
        rng = image_rng(config.seed, record.image_id)
        mask, rep = None, None
        if config.needs_masks:
            try:
                mask = masks.get(record)
            except (MaskReadError, MaskDimMismatch) as exc:
                rep = ImageReport(record.image_id, status=f"passthrough:{type(exc).__name__}")
        if rep is not None:
            pixels, anns = record.pixels.copy(), list(index.annotations_for(record.image_id))
        else:
            pixels, anns, rep = augment_image(
                record, index.annotations_for(record.image_id), mask, artifacts.maps.get(record.image_id),
                artifacts.bank, artifacts.heatmaps, artifacts.binning, config, rng)
        out_rec = ImageRecord(record.image_id, pixels, record.mask_path, record.path)
        if out_dir is not None:
            dataset_io.write_image(out_rec, out_dir)
        return out_rec, anns, rep

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, index.records))
    else:
        results = [work(r) for r in index.records]

    records, annotations, reports = [], {}, []
    for rec, anns, rep in results:
        records.append(rec)
        annotations[rec.image_id] = anns
        reports.append(rep)
    out_index = DatasetIndex(records, annotations)
    report = AugmentationReport(config.to_dict(), reports, artifacts.summary())
    if out_dir is not None:
        out = Path(out_dir)
        dataset_io.write_coco(records, annotations, out / "annotations.json")
        report.write(out / "report.json")
    return out_index, report
