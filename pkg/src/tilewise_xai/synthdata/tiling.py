"""Tile grids over slides: origin arithmetic, tissue filtering, shifted
grids for the stability study, and overlap-rectangle helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .slides import BACKGROUND_MEAN_THRESHOLD, SyntheticSlide


class TilingError(ValueError):
    """Invalid grid specification relative to a slide."""


@dataclass(frozen=True)
class GridSpec:
    """Regular non-overlapping grid, optionally shifted by quarter tiles."""

    tile_size: int = 64
    shift: Tuple[int, int] = (0, 0)  # (x, y) in units of tile_size / 4
    tissue_threshold: float = 0.9

    def __post_init__(self):
        if self.tile_size < 4 or self.tile_size % 4 != 0:
            raise TilingError("tile size must be a positive multiple of 4")
        if len(self.shift) != 2 or any(s not in (0, 1) for s in self.shift):
            raise TilingError("shift components must be 0 or 1")
        if not 0.0 <= self.tissue_threshold <= 1.0:
            raise TilingError("tissue threshold outside [0, 1]")

    @property
    def offset(self) -> Tuple[int, int]:
        """Pixel offset (x, y) of the grid origin."""
        q = self.tile_size // 4
        return (self.shift[0] * q, self.shift[1] * q)

    def tag(self) -> str:
        return f"g{self.shift[0]}{self.shift[1]}"


@dataclass
class Tile:
    tile_id: str
    grid_col: int  # i: origin_x = i*L + shift_x*L/4
    grid_row: int  # j: origin_y = j*L + shift_y*L/4
    origin_x: int
    origin_y: int
    image: np.ndarray  # L x L x 3
    mask: np.ndarray  # L x L bool ground-truth crop
    tissue_fraction: float

    @property
    def annotated_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class TileBag:
    slide_seed: int
    slide_label: int
    grid: GridSpec
    tiles: List[Tile]

    def __len__(self) -> int:
        return len(self.tiles)

    def images(self) -> List[np.ndarray]:
        return [t.image for t in self.tiles]


def tissue_fraction(image: np.ndarray) -> float:
    """Share of pixels whose channel mean is at or below the background cut."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise TilingError(f"expected an HxWx3 image, got shape {arr.shape}")
    return float((arr.mean(axis=2) <= BACKGROUND_MEAN_THRESHOLD).mean())


def tile_grid(slide: SyntheticSlide, grid: GridSpec = GridSpec()) -> TileBag:
    """All fully-inside grid tiles whose tissue fraction clears the threshold.

    Origins follow (i*L + shift_x*L/4, j*L + shift_y*L/4) in (x, y) pixel
    coordinates; arrays are indexed [y, x].
    """
    image = slide.image
    mask = slide.lesion_mask
    size_y, size_x = image.shape[0], image.shape[1]
    L = grid.tile_size
    if L > size_x or L > size_y:
        raise TilingError(f"tile size {L} exceeds slide extent {size_x}x{size_y}")
    off_x, off_y = grid.offset
    tiles: List[Tile] = []
    j = 0
    while off_y + j * L + L <= size_y:
        i = 0
        while off_x + i * L + L <= size_x:
            x0 = off_x + i * L
            y0 = off_y + j * L
            crop = image[y0:y0 + L, x0:x0 + L]
            frac = tissue_fraction(crop)
            if frac >= grid.tissue_threshold:
                tiles.append(Tile(
                    tile_id=f"s{slide.seed}_{grid.tag()}_r{j}_c{i}",
                    grid_col=i, grid_row=j,
                    origin_x=x0, origin_y=y0,
                    image=crop.copy(),
                    mask=mask[y0:y0 + L, x0:x0 + L].copy(),
                    tissue_fraction=frac,
                ))
            i += 1
        j += 1
    return TileBag(slide_seed=slide.seed, slide_label=slide.label,
                   grid=grid, tiles=tiles)


def overlap_extent(origin_a: int, origin_b: int, length: int) -> int:
    """Length of the 1-d intersection of [a, a+L) and [b, b+L)."""
    return max(0, min(origin_a, origin_b) + length - max(origin_a, origin_b))


def overlap_rectangle(a: Tile, b: Tile, tile_size: int
                      ) -> Optional[Tuple[int, int, int, int]]:
    """(x0, y0, x1, y1) of the overlap in slide coordinates, or None."""
    w = overlap_extent(a.origin_x, b.origin_x, tile_size)
    h = overlap_extent(a.origin_y, b.origin_y, tile_size)
    if w == 0 or h == 0:
        return None
    x0 = max(a.origin_x, b.origin_x)
    y0 = max(a.origin_y, b.origin_y)
    return (x0, y0, x0 + w, y0 + h)


def crop_to_rectangle(tile_map: np.ndarray, tile: Tile,
                      rect: Tuple[int, int, int, int]) -> np.ndarray:
    """Restrict a per-pixel map of `tile` to a slide-coordinate rectangle."""
    x0, y0, x1, y1 = rect
    return tile_map[y0 - tile.origin_y:y1 - tile.origin_y,
                    x0 - tile.origin_x:x1 - tile.origin_x]
