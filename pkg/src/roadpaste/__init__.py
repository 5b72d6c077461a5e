"""Cut-and-paste road damage augmentation that respects the road surface and
the camera perspective of the target image."""

from .dataset_io import (
    CLASSES,
    Annotation,
    BoundingBox,
    DatasetIndex,
    ImageRecord,
    RoadMask,
    load_dataset,
    load_mask,
    write_augmented,
)
from .perspective import (
    PerspectiveMap,
    PitchBinning,
    VanishingEstimate,
    assign_bin,
    build_pitch_bins,
    estimate_vanishing_row,
    perspective_scale,
)
from .damage_bank import DamageBank, DamageInstance, extract_bank, sample_instance
from .placement import PlacementHeatmap, PlacementSample, build_heatmaps, sample_placement
from .warp import Quad, solve_homography, target_quad, warp_patch
from .blend import BlendRegion, alpha_paste, clip_to_road, poisson_blend
from .pipeline import AugmentationConfig, AugmentationReport, augment_dataset, augment_image

__version__ = "0.1.0"
