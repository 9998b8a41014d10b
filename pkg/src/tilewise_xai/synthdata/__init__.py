"""Synthetic slides, tiling grids, stain handling, and dataset persistence."""

from .dataio import (
    DataError,
    DatasetSpec,
    generate_dataset,
    load_manifest,
    load_mask_pgm,
    load_png,
    load_slide,
    load_split,
    plan_slide,
    save_gray_png,
    save_mask_pgm,
    save_png,
    save_slide,
    slide_seed_ranges,
)
from .slides import (
    BACKGROUND_MEAN_THRESHOLD,
    STAIN_E,
    STAIN_H,
    SlideError,
    SlideParams,
    SyntheticSlide,
    generate_slide,
)
from .stain import (
    NormalizationResult,
    StainError,
    StainProfile,
    macenko_fit,
    macenko_normalize,
    od_to_rgb,
    rgb_to_od,
    stain_perturb,
)
from .tiling import (
    GridSpec,
    Tile,
    TileBag,
    TilingError,
    crop_to_rectangle,
    overlap_extent,
    overlap_rectangle,
    tile_grid,
    tissue_fraction,
)

__all__ = [
    "BACKGROUND_MEAN_THRESHOLD",
    "DataError",
    "DatasetSpec",
    "GridSpec",
    "NormalizationResult",
    "STAIN_E",
    "STAIN_H",
    "SlideError",
    "SlideParams",
    "StainError",
    "StainProfile",
    "SyntheticSlide",
    "Tile",
    "TileBag",
    "TilingError",
    "crop_to_rectangle",
    "generate_dataset",
    "generate_slide",
    "load_manifest",
    "load_mask_pgm",
    "load_png",
    "load_slide",
    "load_split",
    "macenko_fit",
    "macenko_normalize",
    "od_to_rgb",
    "overlap_extent",
    "overlap_rectangle",
    "plan_slide",
    "rgb_to_od",
    "save_gray_png",
    "save_mask_pgm",
    "save_png",
    "save_slide",
    "slide_seed_ranges",
    "stain_perturb",
    "tile_grid",
    "tissue_fraction",
]
