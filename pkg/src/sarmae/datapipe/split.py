"""Latitude-band train/val/test splitting and label-fraction subsampling."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ..tensor_core import make_rng

DEFAULT_PATTERN = ("train", "train", "train", "val", "test")
SPLITS = ("train", "val", "test")
PAPER_FRACTIONS = (0.001, 0.01, 0.1, 1.0)


@dataclass
class SplitManifest:
    band_height_deg: float
    pattern: tuple[str, ...]
    origin_lat: float
    entries: dict[str, str] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(self.entries.values())
        return {s: c.get(s, 0) for s in SPLITS}

    def fractions(self) -> dict[str, float]:
        total = len(self.entries)
        return {s: n / total for s, n in self.counts.items()}

    def ids(self, split: str) -> list[str]:
        return [tid for tid, s in self.entries.items() if s == split]

    def to_dict(self) -> dict:
        return {
            "band_height_deg": self.band_height_deg,
            "pattern": list(self.pattern),
            "origin_lat": self.origin_lat,
            "counts": self.counts,
            "entries": self.entries,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "SplitManifest":
        d = json.loads(Path(path).read_text())
        return cls(
            band_height_deg=d["band_height_deg"],
            pattern=tuple(d["pattern"]),
            origin_lat=d["origin_lat"],
            entries=dict(d["entries"]),
        )


def _tile_id_and_lat(tile) -> tuple[str, float]:
    if isinstance(tile, dict):
        tid, bounds = tile["tile_id"], tile["lon_lat_bounds"]
    else:
        tid, bounds = tile.tile_id, tile.lon_lat_bounds
    return tid, (bounds[1] + bounds[3]) / 2.0


def band_index(lat: float, origin_lat: float, band_height_deg: float) -> int:
    return math.floor((lat - origin_lat) / band_height_deg)


def band_split(
    tiles: Iterable,
    band_height_deg: float = 0.5,
    pattern: Sequence[str] = DEFAULT_PATTERN,
    seed: int | None = None,
    origin_lat: float | None = None,
) -> SplitManifest:
    """Assign each tile by the latitude band of its centroid.

    Band ``i`` counts from ``origin_lat`` (default: the southernmost centroid)
    and receives ``pattern[i % len(pattern)]``. The result does not depend on
    ``seed``; the argument exists so every stage shares one call shape.
    """
    if band_height_deg <= 0:
        raise ValueError(f"band height must be positive, got {band_height_deg}")
    pattern = tuple(pattern)
    if not pattern or any(p not in SPLITS for p in pattern):
        raise ValueError(f"pattern entries must be drawn from {SPLITS}, got {pattern}")
    located = [_tile_id_and_lat(t) for t in tiles]
    if not located:
        raise ValueError("band_split needs at least one tile")
    if origin_lat is None:
        origin_lat = min(lat for _, lat in located)
    manifest = SplitManifest(band_height_deg=band_height_deg, pattern=pattern, origin_lat=origin_lat)
    for tid, lat in located:
        if tid in manifest.entries:
            raise ValueError(f"duplicate tile id {tid}")
        manifest.entries[tid] = pattern[band_index(lat, origin_lat, band_height_deg) % len(pattern)]
    return manifest


def label_fraction_sample(manifest: SplitManifest, fraction: float, seed: int) -> list[str]:
    """ceil(fraction * |train|) train tiles from one seeded permutation.

    Every fraction takes a prefix of the same permutation, so smaller subsets
    are nested inside larger ones for a fixed seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    if fraction not in PAPER_FRACTIONS:
        warnings.warn(f"label fraction {fraction} is outside the ablation set {PAPER_FRACTIONS}", stacklevel=2)
    train = sorted(manifest.ids("train"))
    if not train:
        raise ValueError("manifest has no train tiles")
    k = math.ceil(round(fraction * len(train), 9))
    if fraction == 1.0:
        return train
    order = make_rng(seed, "label_fraction").permutation(len(train))
    return sorted(train[i] for i in order[:k])
