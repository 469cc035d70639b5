from .labels import CLASS_NAMES, VEG_GRID_SIDE, VEGETATION_CLASSES, veg_label_from_grid
from .split import DEFAULT_PATTERN, PAPER_FRACTIONS, SplitManifest, band_split, label_fraction_sample
from .stats import (
    EARTH_LAND_KM2,
    PAPER_TILE_COUNTS,
    TILE_AREA_KM2,
    AoiStats,
    aoi_stats,
    aoi_stats_from_counts,
    paper_stats,
    render_stats_csv,
    render_stats_text,
)
from .synth import class_means_db, speckle_std_db, synth_tile_bounds, synth_tiles
from .tiles import (
    AOIS,
    CHANNEL_NAMES,
    NUM_CHANNELS,
    NUM_CLASSES,
    ChannelStats,
    TileFormatError,
    TileRecord,
    read_corpus,
    read_tile,
    write_corpus,
    write_tile,
)
