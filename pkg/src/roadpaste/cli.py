"""Command-line entry point.

Subcommands::

    roadpaste index         --dataset D --out A
    roadpaste bank extract  --dataset D --out A/bank  [--index A/perspective.tsv]
    roadpaste heatmap build --dataset D --out A/heatmaps [--index A/perspective.tsv]
    roadpaste augment       --dataset D --out O [--ablation ours] [--seed 42] [--jobs 4]
    roadpaste inspect       --dataset O --out I [--artifacts A] [--masks M] [--images id ...]
    roadpaste stats         --dataset D

Settings come from built-in defaults, then an INI file (``--config``), then
flags. The log level is read from ``ROADPASTE_LOG_LEVEL``. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import dataset_io
from .damage_bank import extract_bank, save_bank
from .errors import RoadPasteError
from .perspective import PerspectiveMap, PitchBinning, assign_bin, build_pitch_bins
from .pipeline import (
    ABLATIONS,
    BLEND_MODES,
    Artifacts,
    AugmentationConfig,
    MaskStore,
    augment_dataset,
    estimate_maps,
)
from .placement import build_heatmaps, false_color, load_heatmaps, save_heatmaps

log = logging.getLogger("roadpaste")

SUBCOMMANDS = ("index", "bank-extract", "heatmap-build", "augment", "inspect", "stats")
LOG_ENV = "ROADPASTE_LOG_LEVEL"

# section -> {key: converter}; keys of the augmentation config plus run-level paths
CONFIG_SCHEMA = {
    "dataset": {"manifest": str, "artifacts": str, "masks": str},
    "perspective": {"bins": int, "min_road_pixels": int},
    "bank": {"min_scale": float},
    "placement": {"sigma": float, "grid": int, "heatmap_weight": float},
    "warp": {"scale_min": float, "scale_max": float},
    "blend": {"blend_mode": str},
    "pipeline": {
        "seed": int, "ablation": str, "inject": "bool", "content_aware": "bool",
        "perspective_aware": "bool", "injections_per_image": int,
        "max_attempts_per_injection": int, "overlap_iou_max": float,
        "min_injected_area_px": float, "class_filter": str, "jobs": int,
    },
}
RUN_KEYS = {"manifest", "artifacts", "masks", "jobs", "ablation"}


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    subcommand: str
    dataset: Path | None = None
    out: Path | None = None
    artifacts: Path | None = None
    masks: Path | None = None
    index_table: Path | None = None
    images: list = field(default_factory=list)
    jobs: int = 1
    log_level: str = "WARNING"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--dataset", type=Path, help="dataset directory or JSON manifest")
    p.add_argument("--out", type=Path, help="output directory")


def _tunables(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--bins", type=int, help="number of pitch bins")
    p.add_argument("--sigma", type=float, help="heatmap smoothing in grid cells")
    p.add_argument("--grid", type=int, help="heatmap grid size")
    p.add_argument("--blend-mode", choices=BLEND_MODES)
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--injections", type=int, dest="injections_per_image")
    p.add_argument("--jobs", type=int)


def build_parser():
    parser = _Parser(prog="roadpaste", description="Content- and perspective-aware damage injection")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("index", help="estimate horizons and pitch bins")
    _common(p)
    _tunables(p)

    for name, action in (("bank", "extract"), ("heatmap", "build")):
        grp = sub.add_parser(name, help=f"{name} {action}")
        grp_sub = grp.add_subparsers(dest="action", parser_class=_Parser)
        p = grp_sub.add_parser(action)
        _common(p)
        _tunables(p)
        p.add_argument("--index", type=Path, dest="index_table", help="perspective table from `index`")
        alias = sub.add_parser(f"{name}-{action}")
        _common(alias)
        _tunables(alias)
        alias.add_argument("--index", type=Path, dest="index_table")

    p = sub.add_parser("augment", help="inject damages into a dataset")
    _common(p)
    _tunables(p)
    p.add_argument("--artifacts", type=Path, help="directory holding a perspective table (optional)")

    p = sub.add_parser("inspect", help="render overlays of an augmented dataset")
    _common(p)
    p.add_argument("--artifacts", type=Path)
    p.add_argument("--masks", type=Path)
    p.add_argument("--images", nargs="*", default=[])

    p = sub.add_parser("stats", help="print dataset statistics")
    _common(p)
    return parser


def _to_bool(key, text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"invalid value for {key}: {text!r}")


def read_config_file(path):
    """Flat ``{key: value}`` from an INI file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in CONFIG_SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            conv = CONFIG_SCHEMA[section].get(key)
            if conv is None:
                raise UsageError(f"unknown config key {section}.{key}")
            try:
                values[key] = _to_bool(key, raw) if conv == "bool" else conv(raw)
            except ValueError as exc:
                raise UsageError(f"invalid value for {key}: {raw!r}") from exc
    return values


def _merge(file_values, flag_values):
    """Defaults < config file < flags; an ablation preset expands before its layer's own keys."""
    merged = {}
    for layer in (file_values, flag_values):
        if layer.get("ablation"):
            if layer["ablation"] not in ABLATIONS:
                raise UsageError(f"invalid value for ablation: {layer['ablation']!r}")
            merged.update(ABLATIONS[layer["ablation"]])
        merged.update({k: v for k, v in layer.items() if k != "ablation" and v is not None})
    return merged


def parse_cli(argv):
    """Parse ``argv`` into ``(subcommand, CliConfig)``; exits with code 2 on usage errors."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    command = args.command
    if command in ("bank", "heatmap"):
        if args.action is None:
            parser.error(f"{command} needs a subcommand")
        command = f"{command}-{args.action}"

    try:
        file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
        flags = {k: getattr(args, k, None) for k in
                 ("seed", "bins", "sigma", "grid", "blend_mode", "ablation", "injections_per_image", "jobs")}
        merged = _merge(file_values, flags)
        aug_kwargs = {k: v for k, v in merged.items() if k not in RUN_KEYS}
        for key in aug_kwargs:
            if key not in AugmentationConfig.field_names():
                raise UsageError(f"unknown setting {key}")
        try:
            aug = AugmentationConfig(**aug_kwargs)
        except ValueError as exc:
            raise UsageError(f"invalid configuration: {exc}") from exc
        jobs = merged.get("jobs", 1)
        if jobs < 1:
            raise UsageError("invalid value for jobs: must be >= 1")
    except UsageError as exc:
        parser.error(str(exc))

    def path_or(flag, key):
        if flag is not None:
            return flag
        return Path(file_values[key]) if key in file_values else None

    cfg = CliConfig(
        subcommand=command,
        dataset=path_or(args.dataset, "manifest"),
        out=args.out,
        artifacts=path_or(getattr(args, "artifacts", None), "artifacts"),
        masks=path_or(getattr(args, "masks", None), "masks"),
        index_table=getattr(args, "index_table", None),
        images=list(getattr(args, "images", []) or []),
        jobs=jobs,
        log_level=os.environ.get(LOG_ENV, "WARNING").upper(),
        augmentation=aug,
    )
    if command != "inspect" and cfg.dataset is None:
        parser.error("--dataset is required (or [dataset] manifest in the config file)")
    if command not in ("stats",) and cfg.out is None:
        parser.error("--out is required")
    return command, cfg


# ---------------------------------------------------------------- artifacts

TABLE_FIELDS = ("image_id", "y_v", "confidence", "h", "bin")


def write_perspective_table(path, estimates, maps, binning, failures=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TABLE_FIELDS)
        for image_id in sorted(maps):
            m = maps[image_id]
            w.writerow([image_id, repr(m.y_v), estimates[image_id].confidence, repr(m.horizon_ratio),
                        assign_bin(m.horizon_ratio, binning)])
        for image_id, reason in sorted((failures or {}).items()):
            w.writerow([image_id, "", reason, "", ""])
    (path.parent / "bins.txt").write_text("edges\t" + " ".join(repr(e) for e in binning.edges) + "\n")
    return path


def read_perspective_table(path, index):
    """Maps and binning from a table written by ``index``."""
    path = Path(path)
    maps = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if not row["y_v"] or row["image_id"] not in {r.image_id for r in index.records}:
                continue
            rec = index.record(row["image_id"])
            maps[rec.image_id] = PerspectiveMap(float(row["y_v"]), rec.height, rec.width)
    edges_file = path.parent / "bins.txt"
    edges = ()
    if edges_file.exists():
        text = edges_file.read_text().split("\t", 1)[1].split()
        edges = tuple(float(e) for e in text)
    return maps, PitchBinning(edges)


def _maps_and_bins(cfg, index):
    if cfg.index_table is not None:
        return read_perspective_table(cfg.index_table, index)
    _, maps, _ = estimate_maps(index, MaskStore(), cfg.augmentation.min_road_pixels)
    return maps, build_pitch_bins([maps[i].horizon_ratio for i in sorted(maps)], cfg.augmentation.bins)


def cmd_index(cfg):
    index = dataset_io.load_dataset(cfg.dataset)
    estimates, maps, failures = estimate_maps(index, MaskStore(), cfg.augmentation.min_road_pixels)
    binning = build_pitch_bins([maps[i].horizon_ratio for i in sorted(maps)], cfg.augmentation.bins)
    path = write_perspective_table(Path(cfg.out) / "perspective.tsv", estimates, maps, binning, failures)
    print(f"wrote {path} ({len(maps)} images, {len(failures)} without a usable mask)")
    return 0


def cmd_bank_extract(cfg):
    index = dataset_io.load_dataset(cfg.dataset)
    maps, binning = _maps_and_bins(cfg, index)
    bank = extract_bank(index, maps, binning, cfg.augmentation.min_scale)
    save_bank(bank, cfg.out)
    print(f"wrote {len(bank)} instances to {cfg.out}")
    return 0


def cmd_heatmap_build(cfg):
    index = dataset_io.load_dataset(cfg.dataset)
    maps, binning = _maps_and_bins(cfg, index)
    heatmaps = build_heatmaps(index, maps, binning, cfg.augmentation.sigma, cfg.augmentation.grid)
    save_heatmaps(heatmaps, cfg.out)
    print(f"wrote {len(heatmaps)} heatmaps to {cfg.out}")
    return 0


def cmd_augment(cfg):
    index = dataset_io.load_dataset(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = None
    table = Path(cfg.artifacts) / "perspective.tsv" if cfg.artifacts else None
    aug = cfg.augmentation
    if table is not None and table.is_file() and aug.inject and aug.perspective_aware:
        maps, binning = read_perspective_table(table, index)
        artifacts = Artifacts(extract_bank(index, maps, binning, aug.min_scale), maps, {}, binning,
                              build_heatmaps(index, maps, binning, aug.sigma, aug.grid))
    _, report = augment_dataset(index, None, aug, out, jobs=cfg.jobs, artifacts=artifacts)
    (out / "load_report.txt").write_text(index.report.to_text())
    t = report.totals()
    print(f"augmented {t['images']} images: {t['accepted']}/{t['attempted']} injections accepted")
    return 0


def cmd_stats(cfg):
    index = dataset_io.load_dataset(cfg.dataset)
    counts = Counter((a.class_id, a.provenance) for a in index.all_annotations())
    print(f"images\t{len(index)}")
    for c in dataset_io.CLASSES:
        print(f"{c}\toriginal={counts[(c, 'original')]}\tinjected={counts[(c, 'injected')]}")
    sys.stdout.write(index.report.to_text())
    report = Path(cfg.dataset) / "report.json"
    if report.is_file():
        totals = json.loads(report.read_text())["totals"]
        for k in ("attempted", "accepted", "failed_injections", "passthrough"):
            print(f"{k}\t{totals[k]}")
    return 0


# ---------------------------------------------------------------- inspect

def _mask_contour(grid):
    inner = grid.copy()
    inner[1:] &= grid[:-1]
    inner[:-1] &= grid[1:]
    inner[:, 1:] &= grid[:, :-1]
    inner[:, :-1] &= grid[:, 1:]
    return grid & ~inner


def render_overlay(pixels, annotations, mask=None, horizon=None, points=()):
    """Overlay image plus a count of each drawn element kind."""
    im = Image.fromarray(pixels).convert("RGB")
    arr = np.asarray(im).copy()
    drawn = Counter()
    if mask is not None:
        arr[_mask_contour(mask)] = (255, 220, 0)
        drawn["mask_contour"] += 1
    im = Image.fromarray(arr)
    draw = ImageDraw.Draw(im)
    if horizon is not None and 0 <= horizon < im.height:
        draw.line([(0, horizon), (im.width - 1, horizon)], fill=(0, 220, 255), width=1)
        drawn["horizon"] += 1
    for a in annotations:
        injected = a.provenance == "injected"
        b = a.bbox
        draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_max - 1],
                       outline=(255, 40, 40) if injected else (40, 255, 40), width=2 if injected else 1)
        drawn["injected_box" if injected else "original_box"] += 1
    for x, y in points:
        draw.line([(x - 4, y), (x + 4, y)], fill=(255, 0, 255))
        draw.line([(x, y - 4), (x, y + 4)], fill=(255, 0, 255))
        drawn["placement"] += 1
    return np.asarray(im), drawn


def run_inspect(index, artifacts=None, out_dir=None, image_ids=(), masks_dir=None, report=None):
    """Write overlay PNGs for the requested images and heatmap renders per bin.

    ``report`` is a parsed ``report.json`` (for placement points). Returns
    ``(written paths, {image_id: drawn element counts})``; unknown ids and
    missing artifacts only produce warnings.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, drawn = [], {}
    horizons, placements = {}, {}
    table = Path(artifacts) / "perspective.tsv" if artifacts else None
    if table is not None and table.is_file():
        with open(table, newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                if row["y_v"]:
                    horizons[row["image_id"]] = float(row["y_v"])
    elif artifacts:
        log.warning("no perspective table under %s; horizons not drawn", artifacts)
    if report:
        for img in report.get("images", []):
            placements[img["image_id"]] = [tuple(i["placement"]) for i in img["injections"]]

    wanted = list(image_ids) or [r.image_id for r in index.records]
    known = {r.image_id for r in index.records}
    for image_id in wanted:
        if image_id not in known:
            log.warning("unknown image_id %s skipped", image_id)
            continue
        rec = index.record(image_id)
        mask = None
        if masks_dir is not None:
            cands = [p for p in sorted(Path(masks_dir).glob(f"{image_id}.*"))
                     if p.suffix.lower() in dataset_io.IMAGE_SUFFIXES]
            if cands:
                mask = dataset_io.load_mask(cands[0], (rec.height, rec.width)).grid
            else:
                log.warning("no mask for %s", image_id)
        y_v = horizons.get(image_id)
        pixels, counts = render_overlay(rec.pixels, index.annotations_for(image_id), mask,
                                        int(round(y_v)) if y_v is not None else None,
                                        placements.get(image_id, ()))
        path = out / f"{image_id}_overlay.png"
        Image.fromarray(pixels).save(path)
        written.append(path)
        drawn[image_id] = counts

    heat_dir = Path(artifacts) / "heatmaps" if artifacts else None
    if heat_dir is not None and (heat_dir / "heatmaps.npz").is_file():
        for b, hm in sorted(load_heatmaps(heat_dir).items()):
            path = out / f"heatmap_bin{b}.png"
            Image.fromarray(false_color(hm.grid)).save(path)
            written.append(path)
    elif artifacts:
        log.warning("no heatmaps under %s", artifacts)
    return written, drawn


def cmd_inspect(cfg):
    if cfg.dataset is None:
        raise RoadPasteError("inspect needs --dataset (an augmented output directory)")
    index = dataset_io.load_dataset(cfg.dataset)
    report_path = Path(cfg.dataset) / "report.json"
    report = json.loads(report_path.read_text()) if report_path.is_file() else None
    written, _ = run_inspect(index, cfg.artifacts, cfg.out, cfg.images, cfg.masks, report)
    if not written:
        log.error("nothing rendered")
        return 1
    print(f"wrote {len(written)} renders to {cfg.out}")
    return 0


COMMANDS = {
    "index": cmd_index,
    "bank-extract": cmd_bank_extract,
    "heatmap-build": cmd_heatmap_build,
    "augment": cmd_augment,
    "inspect": cmd_inspect,
    "stats": cmd_stats,
}


def main(argv=None):
    try:
        command, cfg = parse_cli(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, cfg.log_level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[command](cfg)
    except (RoadPasteError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
