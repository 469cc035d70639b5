"""Per-AOI tile statistics (counts, area, share of Earth's land, storage)."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .tiles import NUM_CHANNELS

TILE_SIDE_KM = 4.48
TILE_AREA_KM2 = TILE_SIDE_KM**2  # 20.0704
# Earth's land surface area, km^2.
EARTH_LAND_KM2 = 1.489e8
PAPER_TILE_SIDE_PX = 448

# Tile counts per AOI in the full-scale dataset.
PAPER_TILE_COUNTS = {"China": 285402, "CONUS": 167403, "Europe": 200489, "SouthAmerica": 83756}
PRETRAIN_AOIS = ("China", "CONUS", "Europe")


def sartile_bytes(side: int = PAPER_TILE_SIDE_PX, with_mask: bool = True) -> int:
    return 12 + 4 * NUM_CHANNELS * side * side + (side * side if with_mask else 0)


@dataclass
class AoiStats:
    aoi: str
    n_tiles: int
    area_km2: float
    pct_land_surface: float
    size_gb_estimate: float

    @classmethod
    def from_count(cls, aoi: str, n_tiles: int, bytes_per_tile: int | None = None) -> "AoiStats":
        """``size_gb_estimate`` is the uncompressed SARTILE1 footprint (1 GB = 1e9 bytes)."""
        if bytes_per_tile is None:
            bytes_per_tile = sartile_bytes()
        area = n_tiles * TILE_AREA_KM2
        return cls(aoi, n_tiles, area, 100.0 * area / EARTH_LAND_KM2, n_tiles * bytes_per_tile / 1e9)


def aoi_stats_from_counts(
    counts: Mapping[str, int],
    groups: Mapping[str, Sequence[str]] | None = None,
    bytes_per_tile: int | None = None,
) -> list[AoiStats]:
    """One row per AOI, then one per group (e.g. ``{"Pretrain": [...], "Total": [...]}``)."""
    rows = [AoiStats.from_count(aoi, n, bytes_per_tile) for aoi, n in counts.items()]
    for name, members in (groups or {}).items():
        rows.append(AoiStats.from_count(name, sum(counts.get(m, 0) for m in members), bytes_per_tile))
    return rows


def aoi_stats(tiles: Iterable, groups=None, bytes_per_tile: int | None = None) -> list[AoiStats]:
    counts = Counter(t["aoi"] if isinstance(t, dict) else t.aoi for t in tiles)
    return aoi_stats_from_counts(dict(counts), groups, bytes_per_tile)


def paper_stats() -> list[AoiStats]:
    groups = {"Pretrain": PRETRAIN_AOIS, "Total": tuple(PAPER_TILE_COUNTS)}
    return aoi_stats_from_counts(PAPER_TILE_COUNTS, groups)


_HEADERS = ("AOI", "Total No. Tiles", "Area (km^2)", "% Earth's land surface", "Size (GB)")


def _cells(row: AoiStats) -> tuple[str, ...]:
    return (row.aoi, str(row.n_tiles), f"{row.area_km2:.4g}", f"{row.pct_land_surface:.1f}%", f"{row.size_gb_estimate:.0f}")


def render_stats_text(rows: Sequence[AoiStats]) -> str:
    table = [_HEADERS] + [_cells(r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(_HEADERS))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_stats_csv(rows: Sequence[AoiStats]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(asdict(rows[0]).keys()) if rows else list(AoiStats.__annotations__))
    writer.writeheader()
    for r in rows:
        writer.writerow(asdict(r))
    return buf.getvalue()
