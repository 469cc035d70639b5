"""Tile records and the SARTILE1 on-disk format.

Binary file ``<name>.sartile`` (little-endian)::

    0    8 bytes  magic b"SARTILE1"
    8    u16      S (tile side in pixels)
    10   u16      channel count (12)
    12   f32[C*S*S] pixels, channel-major then row-major
    ...  u8[S*S]  segmentation mask, present only for labelled tiles

The JSON sidecar ``<name>.json`` carries tile_id, aoi, lon/lat bounds, the
channel-name list and the vegetation label.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"SARTILE1"
_HEADER = struct.Struct("<8sHH")

AOIS = ("China", "CONUS", "Europe", "SouthAmerica", "Synthetic")
POLARISATIONS = ("VV", "VH", "VVminusVH")
SEASONS = ("spring", "summer", "autumn", "winter")
CHANNEL_NAMES = tuple(f"{p}_{s}" for p in POLARISATIONS for s in SEASONS)
NUM_CHANNELS = len(CHANNEL_NAMES)
NUM_CLASSES = 11


class TileFormatError(ValueError):
    pass


@dataclass
class TileRecord:
    tile_id: str
    aoi: str
    lon_lat_bounds: tuple[float, float, float, float]
    pixels: np.ndarray
    veg_label: float | None = None
    seg_label: np.ndarray | None = None
    channel_names: tuple[str, ...] = field(default=CHANNEL_NAMES)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.lon_lat_bounds = tuple(float(v) for v in self.lon_lat_bounds)
        self.channel_names = tuple(self.channel_names)
        if self.veg_label is not None:
            self.veg_label = float(self.veg_label)
        if self.seg_label is not None:
            self.seg_label = np.asarray(self.seg_label, dtype=np.uint8)
        self.validate()

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]

    @property
    def centroid(self) -> tuple[float, float]:
        lon0, lat0, lon1, lat1 = self.lon_lat_bounds
        return (lon0 + lon1) / 2.0, (lat0 + lat1) / 2.0

    def validate(self) -> None:
        if self.aoi not in AOIS:
            raise TileFormatError(f"{self.tile_id}: unknown aoi {self.aoi!r}")
        if len(self.channel_names) != NUM_CHANNELS:
            raise TileFormatError(f"{self.tile_id}: expected {NUM_CHANNELS} channel names, got {len(self.channel_names)}")
        if self.channel_names != CHANNEL_NAMES:
            raise TileFormatError(f"{self.tile_id}: channel order {self.channel_names} differs from {CHANNEL_NAMES}")
        if self.pixels.ndim != 3 or self.pixels.shape[0] != NUM_CHANNELS or self.pixels.shape[1] != self.pixels.shape[2]:
            raise TileFormatError(f"{self.tile_id}: pixels must be ({NUM_CHANNELS}, S, S), got {self.pixels.shape}")
        if self.veg_label is not None and not 0.0 <= self.veg_label <= 100.0:
            raise TileFormatError(f"{self.tile_id}: veg_label {self.veg_label} outside [0, 100]")
        if self.seg_label is not None:
            if self.seg_label.shape != self.pixels.shape[1:]:
                raise TileFormatError(f"{self.tile_id}: seg_label shape {self.seg_label.shape} vs pixels {self.pixels.shape}")
            if self.seg_label.size and self.seg_label.max() >= NUM_CLASSES:
                raise TileFormatError(f"{self.tile_id}: seg_label has class {self.seg_label.max()} >= {NUM_CLASSES}")

    def metadata(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "aoi": self.aoi,
            "lon_lat_bounds": list(self.lon_lat_bounds),
            "channels": list(self.channel_names),
            "veg_label": self.veg_label,
            "has_seg_label": self.seg_label is not None,
        }


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_tile(rec: TileRecord, path) -> Path:
    rec.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s = rec.size
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, s, NUM_CHANNELS))
        fh.write(np.ascontiguousarray(rec.pixels, dtype="<f4").tobytes())
        if rec.seg_label is not None:
            fh.write(np.ascontiguousarray(rec.seg_label, dtype=np.uint8).tobytes())
    sidecar_path(path).write_text(json.dumps(rec.metadata(), indent=1))
    return path


def read_tile(path) -> TileRecord:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TileFormatError(f"{path}: header truncated at byte {len(raw)}, expected {_HEADER.size} bytes")
    magic, s, channels = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TileFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if channels != NUM_CHANNELS:
        raise TileFormatError(f"{path}: header declares {channels} channels at byte offset 10, expected {NUM_CHANNELS}")
    pixel_end = _HEADER.size + 4 * channels * s * s
    with_mask = pixel_end + s * s
    if len(raw) < pixel_end:
        raise TileFormatError(
            f"{path}: truncated pixel block: expected {pixel_end} bytes, file has {len(raw)} (ends at byte offset {len(raw)})"
        )
    if len(raw) not in (pixel_end, with_mask):
        raise TileFormatError(f"{path}: length {len(raw)} matches neither {pixel_end} (no mask) nor {with_mask} (mask)")
    pixels = np.frombuffer(raw, dtype="<f4", count=channels * s * s, offset=_HEADER.size).astype(np.float32)
    seg = None
    if len(raw) == with_mask:
        seg = np.frombuffer(raw, dtype=np.uint8, count=s * s, offset=pixel_end).reshape(s, s).copy()

    side = sidecar_path(path)
    if not side.exists():
        raise TileFormatError(f"{path}: sidecar {side.name} missing")
    meta = json.loads(side.read_text())
    if len(meta.get("channels", [])) != NUM_CHANNELS:
        raise TileFormatError(f"{side}: channel list has {len(meta.get('channels', []))} entries, expected {NUM_CHANNELS}")
    if bool(meta.get("has_seg_label")) != (seg is not None):
        raise TileFormatError(f"{side}: has_seg_label={meta.get('has_seg_label')} but mask block present={seg is not None}")
    return TileRecord(
        tile_id=meta["tile_id"],
        aoi=meta["aoi"],
        lon_lat_bounds=tuple(meta["lon_lat_bounds"]),
        pixels=pixels.reshape(channels, s, s),
        veg_label=meta["veg_label"],
        seg_label=seg,
        channel_names=tuple(meta["channels"]),
    )


# -- corpus directories ---------------------------------------------------------

INDEX_NAME = "index.json"


def write_corpus(tiles: Iterable[TileRecord], directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for rec in tiles:
        write_tile(rec, directory / f"{rec.tile_id}.sartile")
        ids.append(rec.tile_id)
    index = {"tiles": ids, **(extra or {})}
    (directory / INDEX_NAME).write_text(json.dumps(index, indent=1))
    return directory


def read_corpus(directory) -> list[TileRecord]:
    directory = Path(directory)
    index_path = directory / INDEX_NAME
    if index_path.exists():
        ids = json.loads(index_path.read_text())["tiles"]
        return [read_tile(directory / f"{tid}.sartile") for tid in ids]
    return [read_tile(p) for p in sorted(directory.glob("*.sartile"))]


# -- channel normalisation --------------------------------------------------------

@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_tiles(cls, tiles: Iterable[TileRecord]) -> "ChannelStats":
        total = np.zeros(NUM_CHANNELS)
        total_sq = np.zeros(NUM_CHANNELS)
        count = 0
        for rec in tiles:
            px = rec.pixels.astype(np.float64).reshape(NUM_CHANNELS, -1)
            total += px.sum(axis=1)
            total_sq += (px * px).sum(axis=1)
            count += px.shape[1]
        if count == 0:
            raise ValueError("cannot compute channel statistics of an empty corpus")
        mean = total / count
        std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-12))
        return cls(mean=mean, std=std)

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        """Standardise a (C, H, W) or (n, C, H, W) array."""
        shape = (-1, 1, 1)
        return ((pixels - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), std=np.asarray(d["std"], dtype=np.float64))
