"""Synthetic 12-channel SAR tiles with known land-cover and vegetation labels.

Each tile gets a piecewise-constant class map (Voronoi cells over random
sites, one class per cell). Every class has a mean backscatter in dB per
polarisation and season. Pixel intensities are the class mean in linear
power times unit-mean gamma speckle with ``SPECKLE_LOOKS`` looks, then
converted back to dB; the VV-VH channels are the dB difference of the
two speckled polarisations. A per-tile, per-season offset shared by all
classes makes the seasons correlated perturbations of one base map.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import polygamma

from ..tensor_core import make_rng
from .labels import CLASS_NAMES, VEGETATION_CLASSES, veg_label_from_grid
from .tiles import NUM_CHANNELS, TileRecord

# Equivalent number of looks of a seasonal mean composite: ~25 dual-orbit
# acquisitions per season at ~4.4 looks each.
SPECKLE_LOOKS = 100.0
# Std (dB) of the per-tile seasonal offset shared by all classes.
SEASON_OFFSET_STD = 0.5
TILE_SIDE_M = 4480.0
METRES_PER_DEG_LAT = 111_320.0

# class -> (VV base dB, VH base dB, seasonal amplitude dB, seasonal profile)
_PROFILES = {
    "flat": (0.0, 0.0, 0.0, 0.0),
    "crop": (-1.0, 1.0, 0.5, -0.5),
    "snow": (1.0, -1.0, -0.5, 1.0),
    "leaf": (-0.3, 0.5, 0.2, -0.4),
    "wet": (1.0, 0.3, -0.6, -0.7),
}
_CLASS_TABLE = {
    "tree_cover": (-7.0, -13.0, 0.6, "leaf"),
    "shrubland": (-10.0, -17.5, 1.0, "leaf"),
    "grassland": (-12.5, -19.5, 1.5, "crop"),
    "cropland": (-9.5, -20.5, 3.0, "crop"),
    "built_up": (-2.5, -12.0, 0.2, "flat"),
    "bare_sparse": (-15.5, -25.0, 0.3, "flat"),
    "snow_ice": (-11.0, -22.5, 4.0, "snow"),
    "water": (-21.0, -28.0, 0.8, "flat"),
    "herbaceous_wetland": (-14.0, -21.0, 3.0, "wet"),
    "mangroves": (-5.5, -15.5, 0.3, "flat"),
    "moss_lichen": (-17.5, -22.0, 1.5, "snow"),
}


def class_means_db() -> np.ndarray:
    """(11 classes, 12 channels) mean dB in channel order [VV, VH, VV-VH] x seasons."""
    means = np.zeros((len(CLASS_NAMES), NUM_CHANNELS))
    for k, name in enumerate(CLASS_NAMES):
        vv, vh, amp, profile = _CLASS_TABLE[name]
        season = amp * np.asarray(_PROFILES[profile])
        means[k, 0:4] = vv + season
        means[k, 4:8] = vh + 0.8 * season
        means[k, 8:12] = means[k, 0:4] - means[k, 4:8]
    return means


def speckle_std_db(looks: float | None = None) -> np.ndarray:
    """Per-channel std (dB) of log-gamma speckle; the difference channels add two independent terms."""
    looks = SPECKLE_LOOKS if looks is None else looks
    single = 10.0 / math.log(10.0) * math.sqrt(float(polygamma(1, looks)))
    return np.array([single] * 8 + [single * math.sqrt(2.0)] * 4)


def check_separation(means: np.ndarray, sigma: np.ndarray, factor: float = 2.0) -> float:
    """Smallest over class pairs of max_c |mean_a - mean_b| / sigma_c; raises if below ``factor``."""
    worst = math.inf
    for a in range(means.shape[0]):
        for b in range(a + 1, means.shape[0]):
            worst = min(worst, float(np.max(np.abs(means[a] - means[b]) / sigma)))
    if worst < factor:
        raise AssertionError(f"class means separated by only {worst:.2f} speckle std (< {factor})")
    return worst


def synth_tile_bounds(n: int, seed: int, lat_range=(40.0, 50.0), lon_range=(0.0, 10.0)) -> list[tuple[float, float, float, float]]:
    """Tile footprints (min_lon, min_lat, max_lon, max_lat) with uniform random centroids."""
    rng = make_rng(seed, "bounds")
    lats = rng.uniform(*lat_range, size=n)
    lons = rng.uniform(*lon_range, size=n)
    dlat = TILE_SIDE_M / METRES_PER_DEG_LAT
    out = []
    for lat, lon in zip(lats, lons):
        dlon = dlat / math.cos(math.radians(lat))
        out.append((lon - dlon / 2, lat - dlat / 2, lon + dlon / 2, lat + dlat / 2))
    return out


def voronoi_class_map(size: int, rng: np.random.Generator, n_sites=(4, 10)) -> np.ndarray:
    k = int(rng.integers(n_sites[0], n_sites[1] + 1))
    sites = rng.uniform(0, size, size=(k, 2))
    classes = rng.integers(0, len(CLASS_NAMES), size=k)
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    d2 = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    return classes[np.argmin(d2, axis=0)].astype(np.uint8)


def render_pixels(class_map: np.ndarray, rng: np.random.Generator, looks: float | None = None) -> np.ndarray:
    looks = SPECKLE_LOOKS if looks is None else looks
    means = class_means_db()
    offsets = rng.normal(0.0, SEASON_OFFSET_STD, size=4)
    s = class_map.shape[0]
    out = np.empty((NUM_CHANNELS, s, s), dtype=np.float32)
    for pol in range(2):
        for season in range(4):
            c = pol * 4 + season
            mu_db = means[class_map, c] + offsets[season]
            speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=(s, s))
            out[c] = mu_db + 10.0 * np.log10(speckle)
    out[8:12] = out[0:4] - out[4:8]
    return out


def synth_tile(index: int, seed: int, size: int, bounds, aoi: str = "Synthetic") -> TileRecord:
    rng = make_rng(seed, "tile", index)
    class_map = voronoi_class_map(size, rng)
    pixels = render_pixels(class_map, rng)
    veg = veg_label_from_grid(np.isin(class_map, VEGETATION_CLASSES) * 100.0)
    return TileRecord(
        tile_id=f"syn{seed}-{index:06d}",
        aoi=aoi,
        lon_lat_bounds=bounds,
        pixels=pixels,
        veg_label=veg,
        seg_label=class_map,
    )


def synth_tiles(n: int, seed: int, desk_size: int = 64, lat_range=(40.0, 50.0), lon_range=(0.0, 10.0)) -> list[TileRecord]:
    """Deterministic labelled corpus; tile ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    check_separation(class_means_db(), speckle_std_db())
    bounds = synth_tile_bounds(n, seed, lat_range, lon_range)
    return [synth_tile(i, seed, desk_size, bounds[i]) for i in range(n)]
