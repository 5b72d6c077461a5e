"""Recover the horizon row from a road mask and turn it into a size profile.

The two road edges converge at the vanishing point. Its row y_v fixes how
large a ground object looks at every row: zero size on the horizon, full
size on the bottom row, linear in between.
"""

import numpy as np

from roadpaste import PerspectiveMap, build_pitch_bins, estimate_vanishing_row
from roadpaste.synthetic import random_trapezoid, trapezoid_mask

# a hand-made road: vanishing point at (320, 120), bottom edge from x=40 to x=600
mask = trapezoid_mask(480, 640, (320, 120), 40, 600, top_row=200)
est = estimate_vanishing_row(mask)
print(f"estimated y_v = {est.y_v:.2f} ({est.confidence}, {est.inliers_left}+{est.inliers_right} edge points)")

pmap = PerspectiveMap.from_estimate(est, *mask.shape)
for y in (150, 240, 360, 479):
    print(f"  row {y}: scale {pmap.scale(y):.3f}")

# a 40 px wide damage cut from the bottom row shrinks as it moves up the road
for y in (479, 360, 240):
    print(f"  40 px patch pasted at row {y} -> {40 * pmap.scale(y):.1f} px")

# pitch bins group images by where their horizon sits in the frame
rng = np.random.default_rng(0)
ratios, errors = [], []
for _ in range(40):
    m, (_, vy) = random_trapezoid(rng)
    e = estimate_vanishing_row(m)
    errors.append(abs(e.y_v - vy))
    ratios.append(e.y_v / m.shape[0])
binning = build_pitch_bins(ratios, k=4)
print(f"\n40 random roads: worst horizon error {max(errors):.2f} px")
print("bin edges on y_v / H:", [round(e, 3) for e in binning.edges])
print("images per bin:", np.bincount([binning.assign(h) for h in ratios], minlength=4).tolist())
