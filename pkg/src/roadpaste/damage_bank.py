"""Damage patch bank indexed by (pitch bin, class)."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset_io import CLASSES, BoundingBox, read_image
from .errors import EmptyBank, WriteError
from .perspective import assign_bin, perspective_scale

MIN_SCALE = 0.05
MIN_PATCH = 2


@dataclass(frozen=True, eq=False)
class DamageInstance:
    instance_id: str
    class_id: str
    image_id: str
    bbox: BoundingBox
    patch: np.ndarray
    s_src: float
    bin: int

    @property
    def patch_h(self):
        return self.patch.shape[0]

    @property
    def patch_w(self):
        return self.patch.shape[1]


@dataclass
class Draw:
    """A sampled instance plus where it came from (``direct`` or ``fallback(b)``)."""

    instance: DamageInstance
    requested_bin: int | None
    provenance: str

    @property
    def fallback(self):
        return self.provenance.startswith("fallback")


@dataclass
class DamageBank:
    groups: dict = field(default_factory=dict)  # (bin, class) -> list[DamageInstance]
    n_bins: int = 1
    min_scale: float = MIN_SCALE
    edges: tuple = ()
    skipped: Counter = field(default_factory=Counter)

    def __len__(self):
        return sum(len(v) for v in self.groups.values())

    def counts(self):
        return {key: len(v) for key, v in sorted(self.groups.items())}

    def instances(self, bin=None, class_filter=None):
        out = []
        for (b, c), items in sorted(self.groups.items()):
            if bin is not None and b != bin:
                continue
            if class_filter is not None and c != class_filter:
                continue
            out.extend(items)
        return out

    def add(self, inst):
        self.groups.setdefault((inst.bin, inst.class_id), []).append(inst)


def crop_patch(pixels, bbox):
    y0, y1 = int(round(bbox.y_min)), int(round(bbox.y_max))
    x0, x1 = int(round(bbox.x_min)), int(round(bbox.x_max))
    return pixels[y0:y1, x0:x1].copy()


def extract_bank(index, maps=None, binning=None, min_scale=MIN_SCALE):
    """Crop every usable annotation into a :class:`DamageBank`.

    ``maps`` maps image_id to :class:`PerspectiveMap`. Without maps the bank is
    perspective-free: every instance lands in bin 0 with unit source scale,
    which is what the non-perspective ablation modes need. Images lacking a
    map are skipped (reason ``no_map``).
    """
    k = binning.k if binning is not None else 1
    bank = DamageBank(n_bins=k, min_scale=min_scale, edges=tuple(binning.edges) if binning else ())
    for rec in index.records:
        anns = index.annotations_for(rec.image_id)
        if not anns:
            continue
        pmap = None
        if maps is not None:
            pmap = maps.get(rec.image_id)
            if pmap is None:
                bank.skipped["no_map"] += len(anns)
                continue
        b = assign_bin(pmap.horizon_ratio, binning) if (pmap is not None and binning is not None) else 0
        for n, ann in enumerate(anns):
            patch = crop_patch(rec.pixels, ann.bbox)
            if patch.shape[0] < MIN_PATCH or patch.shape[1] < MIN_PATCH:
                bank.skipped["too_small"] += 1
                continue
            s_src = perspective_scale(pmap, ann.bbox.y_max) if pmap is not None else 1.0
            if s_src <= min_scale:
                bank.skipped["near_horizon"] += 1
                continue
            bank.add(DamageInstance(f"{rec.image_id}_{n:03d}", ann.class_id, rec.image_id,
                                    ann.bbox, patch, float(s_src), b))
    return bank


def _nonempty_bins(bank, class_filter):
    return sorted({b for (b, c), items in bank.groups.items()
                   if items and (class_filter is None or c == class_filter)})


def sample_instance(bank, bin, rng, class_filter=None):
    """Uniform draw among the instances of ``bin``.

    An empty bin falls back to the nearest nonempty bin (ties go to the lower
    index); the returned :class:`Draw` records which.
    """
    candidates = bank.instances(bin, class_filter)
    provenance = "direct"
    if not candidates:
        bins = _nonempty_bins(bank, class_filter)
        if not bins:
            raise EmptyBank("bank has no instances" + (f" of class {class_filter}" if class_filter else ""))
        nearest = min(bins, key=lambda b: (abs(b - bin), b))
        candidates = bank.instances(nearest, class_filter)
        provenance = f"fallback({nearest})"
    return Draw(candidates[int(rng.integers(len(candidates)))], bin, provenance)


def sample_pooled(bank, rng, class_filter=None):
    """Uniform draw over the whole bank, ignoring bins."""
    candidates = bank.instances(None, class_filter)
    if not candidates:
        raise EmptyBank("bank has no instances" + (f" of class {class_filter}" if class_filter else ""))
    return Draw(candidates[int(rng.integers(len(candidates)))], None, "pooled")


MANIFEST_FIELDS = ("instance_id", "class", "bin", "s_src", "image_id", "x_min", "y_min", "x_max", "y_max")


def save_bank(bank, out_dir):
    out = Path(out_dir)
    try:
        (out / "patches").mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for inst in bank.instances():
                Image.fromarray(inst.patch).save(out / "patches" / f"{inst.instance_id}.png")
                w.writerow([inst.instance_id, inst.class_id, inst.bin, repr(inst.s_src), inst.image_id,
                            *(repr(v) for v in inst.bbox.as_tuple())])
        (out / "bank.txt").write_text(
            f"n_bins\t{bank.n_bins}\nmin_scale\t{bank.min_scale!r}\n"
            f"edges\t{' '.join(repr(e) for e in bank.edges)}\n"
            + "".join(f"skipped_{k}\t{v}\n" for k, v in sorted(bank.skipped.items())))
    except OSError as exc:
        raise WriteError(out, exc) from exc
    return out


def load_bank(bank_dir):
    bank_dir = Path(bank_dir)
    meta = dict(line.split("\t", 1) for line in (bank_dir / "bank.txt").read_text().splitlines() if "\t" in line)
    edges = tuple(float(e) for e in meta.get("edges", "").split())
    bank = DamageBank(n_bins=int(meta["n_bins"]), min_scale=float(meta["min_scale"]), edges=edges)
    for k, v in meta.items():
        if k.startswith("skipped_"):
            bank.skipped[k[len("skipped_"):]] = int(v)
    with open(bank_dir / "manifest.tsv", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if row["class"] not in CLASSES:
                raise ValueError(f"bank manifest: unknown class {row['class']!r}")
            patch = read_image(bank_dir / "patches" / f"{row['instance_id']}.png")
            bbox = BoundingBox(*(float(row[f]) for f in ("x_min", "y_min", "x_max", "y_max")))
            bank.add(DamageInstance(row["instance_id"], row["class"], row["image_id"], bbox, patch,
                                    float(row["s_src"]), int(row["bin"])))
    return bank
