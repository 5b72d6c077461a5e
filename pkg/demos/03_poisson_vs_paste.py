"""Paste a dark crack patch onto a bright road ramp two ways.

Alpha paste copies the pixels and leaves a hard seam. Poisson blending keeps
the patch's gradients but takes its overall level from the surrounding road,
so the seam disappears. Usage: python demos/03_poisson_vs_paste.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from roadpaste.blend import alpha_paste, poisson_blend, region_from_mask

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

h, w = 120, 200
ramp = np.linspace(150, 220, w)
target = np.repeat(np.tile(ramp, (h, 1))[..., None], 3, axis=2).astype(np.uint8)

# source: dark asphalt with a thin diagonal crack
source = np.full((h, w, 3), 60.0)
for t in range(70):
    source[30 + t // 2 + np.arange(-1, 2), 60 + t] = 15.0

omega = np.zeros((h, w), bool)
omega[25:70, 55:135] = True
region = region_from_mask(omega)

pasted = alpha_paste(target, source, region)
blended = poisson_blend(target, source, region, "import")


def seam_jump(img):
    # mean absolute step across the left and right edges of omega
    row = slice(25, 70)
    left = np.abs(img[row, 55].astype(float) - img[row, 54]).mean()
    right = np.abs(img[row, 134].astype(float) - img[row, 135]).mean()
    return (left + right) / 2


print(f"seam step, alpha paste:   {seam_jump(pasted):6.1f}")
print(f"seam step, poisson blend: {seam_jump(blended):6.1f}")
# column 80 holds the crack on row 40; row 55 is plain asphalt
on, off = int(blended[40, 80, 0]), int(blended[55, 80, 0])
print(f"after blending the crack reads {on} against {off} for the asphalt next to it")

Image.fromarray(np.concatenate([target, pasted, blended], axis=1)).save(out / "paste_vs_poisson.png")
print("wrote", out / "paste_vs_poisson.png")
