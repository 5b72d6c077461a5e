"""Dataset loading and writing.

Two annotation inputs are understood:

* Pascal-VOC XML, one file per image (the layout road damage datasets ship in),
* a single COCO-style JSON document.

Output is always COCO-style JSON plus lossless PNG images. Boxes use continuous
pixel coordinates with the origin at the top-left corner of the image.

A dataset is located through a *manifest*: either a JSON file::

    {"images": "train/images", "annotations": "train/annotations/xmls",
     "masks": "train/masks"}

(paths relative to the manifest file), or a dataset directory laid out as
``images/`` + ``annotations/`` (VOC) or ``annotations.json`` (COCO), with an
optional ``masks/`` directory of 8-bit road masks sharing the image stems.
"""

from __future__ import annotations

import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DanglingAnnotation,
    ManifestError,
    MaskDimMismatch,
    MaskReadError,
    UnknownClass,
    WriteError,
)

log = logging.getLogger(__name__)

CLASSES = ("D00", "D10", "D20", "D40")
CLASS_NAMES = {
    "D00": "longitudinal crack",
    "D10": "transverse crack",
    "D20": "alligator crack",
    "D40": "pothole",
}
CATEGORY_IDS = {c: i + 1 for i, c in enumerate(CLASSES)}

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MASK_THRESHOLD = 127


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def bottom_center(self):
        return (0.5 * (self.x_min + self.x_max), self.y_max)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def inside(self, width, height):
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def clip(self, width, height):
        """Intersect with ``[0, width] x [0, height]``; None when nothing is left."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def iou(self, other):
        ix = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        iy = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True)
class Annotation:
    image_id: str
    class_id: str
    bbox: BoundingBox
    provenance: str = "original"

    def __post_init__(self):
        if self.class_id not in CLASSES:
            raise UnknownClass(f"class {self.class_id!r} is not one of {CLASSES}")
        if self.provenance not in ("original", "injected"):
            raise ValueError(f"bad provenance {self.provenance!r}")


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray
    mask_path: Path | None = None
    path: Path | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"{self.image_id}: expected HxWx3 pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"{self.image_id}: expected uint8 pixels, got {px.dtype}")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class RoadMask:
    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ValueError("road mask must be 2-D")

    @property
    def shape(self):
        return self.grid.shape

    @property
    def road_pixel_count(self):
        return int(self.grid.sum())


@dataclass
class LoadReport:
    clipped: int = 0
    dropped: int = 0
    dangling: list = field(default_factory=list)
    unknown: list = field(default_factory=list)
    missing_masks: list = field(default_factory=list)

    def to_text(self):
        lines = [
            f"clipped\t{self.clipped}",
            f"dropped\t{self.dropped}",
            f"dangling\t{len(self.dangling)}",
            f"unknown_class\t{len(self.unknown)}",
            f"missing_masks\t{len(self.missing_masks)}",
        ]
        lines += [f"dangling_ref\t{d}" for d in self.dangling]
        lines += [f"unknown_ref\t{u}" for u in self.unknown]
        return "\n".join(lines) + "\n"


@dataclass
class DatasetIndex:
    records: list
    annotations: dict
    classes: tuple = CLASSES
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.image_id)
        self._by_id = {r.image_id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise ManifestError("duplicate image_id in index")
        for image_id, anns in self.annotations.items():
            rec = self._by_id.get(image_id)
            if rec is None:
                raise DanglingAnnotation(f"annotation references unknown image {image_id!r}")
            for a in anns:
                if not a.bbox.inside(rec.width, rec.height):
                    raise ValueError(f"{image_id}: box {a.bbox.as_tuple()} outside image bounds")
        for r in self.records:
            self.annotations.setdefault(r.image_id, [])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def record(self, image_id):
        return self._by_id[image_id]

    def annotations_for(self, image_id):
        return self.annotations.get(image_id, [])

    def all_annotations(self):
        return [a for r in self.records for a in self.annotations[r.image_id]]


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_mask(path, expected_dims):
    """Read an 8-bit road mask; values above 127 are road.

    ``expected_dims`` is ``(height, width)`` of the owning image.
    """
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise MaskReadError(f"{path}: {exc}") from exc
    if tuple(arr.shape) != tuple(expected_dims):
        raise MaskDimMismatch(f"{path}: mask is {arr.shape}, image is {tuple(expected_dims)}")
    return RoadMask(arr > MASK_THRESHOLD)


def _list_images(directory):
    found = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES or not p.is_file():
            continue
        if p.stem in found:
            raise ManifestError(f"image_id collision: {found[p.stem].name} and {p.name}")
        found[p.stem] = p
    return found


def _resolve_manifest(manifest_path):
    path = Path(manifest_path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    if path.is_file():
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ManifestError(f"unreadable manifest {path}: {exc}") from exc
        if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
            raise ManifestError(f"manifest {path} needs 'images' and 'annotations' entries")
        base = path.parent
        images = base / doc["images"]
        annotations = base / doc["annotations"]
        masks = base / doc["masks"] if doc.get("masks") else None
    else:
        images = path / "images"
        masks = path / "masks" if (path / "masks").is_dir() else None
        annotations = None
        for name in ("annotations.json", "instances.json"):
            if (path / name).is_file():
                annotations = path / name
                break
        if annotations is None:
            for cand in (path / "annotations" / "xmls", path / "annotations"):
                if cand.is_dir():
                    annotations = cand
                    break
        if not images.is_dir() or annotations is None:
            raise ManifestError(f"{path} is not a dataset directory (need images/ and annotations)")
    if not images.is_dir():
        raise ManifestError(f"image directory {images} missing")
    if not annotations.exists():
        raise ManifestError(f"annotation source {annotations} missing")
    fmt = "coco" if annotations.is_file() else "voc"
    return images, annotations, masks, fmt


def _parse_voc(xml_dir):
    """Yield (image stem, label, (xmin, ymin, xmax, ymax), ref) from a VOC directory."""
    for xml_path in sorted(Path(xml_dir).glob("*.xml")):
        try:
            root = ET.parse(xml_path).getroot()
        except ET.ParseError as exc:
            raise ManifestError(f"malformed VOC file {xml_path}: {exc}") from exc
        fname = root.findtext("filename")
        stem = Path(fname).stem if fname else xml_path.stem
        for k, obj in enumerate(root.iter("object")):
            bb = obj.find("bndbox")
            if bb is None:
                continue
            box = tuple(float(bb.findtext(t)) for t in ("xmin", "ymin", "xmax", "ymax"))
            yield stem, (obj.findtext("name") or "").strip(), box, f"{xml_path.name}#{k}", "original"


def _parse_coco(doc_path):
    try:
        doc = json.loads(Path(doc_path).read_text())
    except (OSError, ValueError) as exc:
        raise ManifestError(f"unreadable COCO document {doc_path}: {exc}") from exc
    stems = {im["id"]: Path(im["file_name"]).stem for im in doc.get("images", [])}
    cats = {c["id"]: c["name"] for c in doc.get("categories", [])}
    for ann in doc.get("annotations", []):
        stem = stems.get(ann["image_id"], f"<image {ann['image_id']}>")
        if "bbox_xyxy" in ann:
            box = tuple(float(v) for v in ann["bbox_xyxy"])
        else:
            x, y, w, h = (float(v) for v in ann["bbox"])
            box = (x, y, x + w, y + h)
        label = cats.get(ann["category_id"], str(ann["category_id"]))
        yield stem, label, box, f"annotation {ann.get('id')}", ann.get("provenance", "original")


def load_dataset(manifest_path, skip_unknown=False):
    """Load and validate a dataset described by ``manifest_path``.

    Boxes partially outside the image are clipped, boxes entirely outside are
    dropped; both are counted in ``index.report``. Annotations whose image
    cannot be found are collected as dangling and only raise when every
    annotation is dangling. An unknown class label raises ``UnknownClass``
    unless ``skip_unknown`` is set.
    """
    images_dir, ann_src, masks_dir, fmt = _resolve_manifest(manifest_path)
    files = _list_images(images_dir)
    masks = _list_images(masks_dir) if masks_dir is not None and masks_dir.is_dir() else {}
    report = LoadReport()

    records = []
    for stem, path in files.items():
        mask_path = masks.get(stem)
        if mask_path is None:
            report.missing_masks.append(stem)
        records.append(ImageRecord(stem, read_image(path), mask_path=mask_path, path=path))
    dims = {r.image_id: (r.width, r.height) for r in records}

    parsed = _parse_voc(ann_src) if fmt == "voc" else _parse_coco(ann_src)
    annotations = {}
    total = 0
    for stem, label, box, ref, provenance in parsed:
        total += 1
        if label not in CLASSES:
            if not skip_unknown:
                raise UnknownClass(f"{ref}: unknown class label {label!r}")
            report.unknown.append(f"{ref}:{label}")
            continue
        if stem not in dims:
            report.dangling.append(f"{ref}->{stem}")
            continue
        w, h = dims[stem]
        x0, y0, x1, y1 = box
        if not (x0 < x1 and y0 < y1):
            report.dropped += 1
            continue
        bbox = BoundingBox(x0, y0, x1, y1)
        clipped = bbox.clip(w, h)
        if clipped is None:
            report.dropped += 1
            continue
        if clipped != bbox:
            report.clipped += 1
        annotations.setdefault(stem, []).append(Annotation(stem, label, clipped, provenance))

    if total and len(report.dangling) == total:
        raise DanglingAnnotation(f"all {total} annotations reference missing images")
    if report.dangling:
        log.warning("%d dangling annotations ignored", len(report.dangling))
    return DatasetIndex(records, annotations, report=report)


def write_image(record, out_dir):
    out = Path(out_dir) / "images"
    path = out / f"{record.image_id}.png"
    try:
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(record.pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise WriteError(path, exc) from exc
    return path


def coco_document(records, annotations):
    """Build a COCO-style dict; records are ordered by image_id."""
    images, anns = [], []
    next_ann = 1
    for img_num, rec in enumerate(sorted(records, key=lambda r: r.image_id), start=1):
        images.append({"id": img_num, "file_name": f"{rec.image_id}.png",
                       "width": rec.width, "height": rec.height})
        for a in annotations.get(rec.image_id, []):
            b = a.bbox
            anns.append({
                "id": next_ann,
                "image_id": img_num,
                "category_id": CATEGORY_IDS[a.class_id],
                "bbox": [b.x_min, b.y_min, b.width, b.height],
                "bbox_xyxy": list(b.as_tuple()),
                "area": b.area,
                "iscrowd": 0,
                "provenance": a.provenance,
            })
            next_ann += 1
    categories = [{"id": CATEGORY_IDS[c], "name": c, "supercategory": CLASS_NAMES[c]} for c in CLASSES]
    return {"images": images, "annotations": anns, "categories": categories}


def write_coco(records, annotations, path):
    path = Path(path)
    doc = coco_document(records, annotations)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(path, exc) from exc
    return path


class _Stub:
    # minimal stand-in for records already on disk: only dims and id are needed
    def __init__(self, image_id, width, height):
        self.image_id, self.width, self.height = image_id, width, height


def write_augmented(record, annotations, out_dir):
    """Write ``record`` as PNG and merge its annotations into ``annotations.json``.

    Entries for the same image_id already in the document are replaced, so the
    call is idempotent. Returns the written paths.
    """
    out_dir = Path(out_dir)
    img_path = write_image(record, out_dir)
    doc_path = out_dir / "annotations.json"
    stubs, anns = {}, {}
    if doc_path.exists():
        try:
            doc = json.loads(doc_path.read_text())
        except (OSError, ValueError) as exc:
            raise WriteError(doc_path, exc) from exc
        by_num = {}
        for im in doc["images"]:
            stem = Path(im["file_name"]).stem
            by_num[im["id"]] = stem
            stubs[stem] = _Stub(stem, im["width"], im["height"])
        cats = {c["id"]: c["name"] for c in doc["categories"]}
        for a in doc["annotations"]:
            stem = by_num[a["image_id"]]
            anns.setdefault(stem, []).append(
                Annotation(stem, cats[a["category_id"]], BoundingBox(*a["bbox_xyxy"]), a.get("provenance", "original")))
    stubs[record.image_id] = record
    anns[record.image_id] = list(annotations)
    return [img_path, write_coco(list(stubs.values()), anns, doc_path)]
