"""Label semantics for the two downstream tasks."""

from __future__ import annotations

import numpy as np

# ESA WorldCover v200 classes, in class-id order.
CLASS_NAMES = (
    "tree_cover",
    "shrubland",
    "grassland",
    "cropland",
    "built_up",
    "bare_sparse",
    "snow_ice",
    "water",
    "herbaceous_wetland",
    "mangroves",
    "moss_lichen",
)
# Classes counted as tree cover when deriving a vegetation percentage.
VEGETATION_CLASSES = (CLASS_NAMES.index("tree_cover"), CLASS_NAMES.index("mangroves"))

# 250 m vegetation product over a 4480 m tile: 17.92 samples per side, stored as 18.
VEG_GRID_SIDE = 18


def veg_label_from_grid(grid) -> float:
    """Plain arithmetic mean of a vegetation-percentage grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty vegetation grid")
    if grid.min() < 0.0 or grid.max() > 100.0:
        raise ValueError(f"vegetation grid values must lie in [0, 100], got [{grid.min()}, {grid.max()}]")
    return float(grid.mean())
