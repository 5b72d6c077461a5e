"""Build a small synthetic road dataset and look at what the loader sees.

Each image is a textured road trapezoid with a few painted damages, a binary
road mask and a VOC XML file. Usage: python demos/01_synthetic_dataset.py [out_dir]
"""

import sys
from collections import Counter
from pathlib import Path

from roadpaste import load_dataset
from roadpaste.synthetic import make_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "dataset"
root = make_dataset(out, n_images=10, seed=7)
print("wrote", root)
for sub in ("images", "masks", "annotations"):
    print(f"  {sub}/: {len(list((root / sub).iterdir()))} files")

index = load_dataset(root)
print(f"\nloaded {len(index)} images")
print(index.report.to_text())

# boxes are pixel-edge xyxy; classes come from the four-way damage taxonomy
counts = Counter(a.class_id for a in index.all_annotations())
for cls, n in sorted(counts.items()):
    print(f"  {cls}: {n}")

rec = index.records[0]
for ann in index.annotations_for(rec.image_id):
    b = ann.bbox
    print(f"{rec.image_id} {ann.class_id} box=({b.x_min:.0f}, {b.y_min:.0f}, {b.x_max:.0f}, {b.y_max:.0f})"
          f" bottom centre={b.bottom_center}")
