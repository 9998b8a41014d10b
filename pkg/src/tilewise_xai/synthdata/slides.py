"""Deterministic synthetic slide generator with pixel-level ground truth.

A slide is a near-white background holding one wobbly tissue region built as
a two-stain transmitted-light mixture: the tissue body is eosin-dominant
(pink), lesions are hematoxylin-dominant (dark purple) irregular blobs with
a graded boundary band so that boundary structure exists for models to pick
up. The lesion mask is exact: a pixel is positive where lesion blending is
at least one half.

Placement guarantees (enforced numerically, not just by construction):
every lesion lies fully inside tissue, keeps at least one tile length of
distance from the slide edge, and every base-grid tile it touches clears the
tissue-fraction keep threshold. Together these make slide label and
kept-tile ground truth strictly consistent. The tissue region grows a padded
lobe around each lesion, so the final outline is lobulated rather than a
single smooth blob and lesions reach tiles near the tissue rim.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

# unit optical-density vectors of the two stains (hematoxylin-like first)
STAIN_H = np.array([0.65, 0.70, 0.29]) / np.linalg.norm([0.65, 0.70, 0.29])
STAIN_E = np.array([0.07, 0.99, 0.11]) / np.linalg.norm([0.07, 0.99, 0.11])

BACKGROUND_MEAN_THRESHOLD = 240.0  # pixel channel-mean above this = background


class SlideError(ValueError):
    """Infeasible generation parameters or failed lesion placement."""


@dataclass(frozen=True)
class SlideParams:
    size: int = 512
    tile_size: int = 64  # grid the placement guarantees refer to
    lesion_count: int = 4
    lesion_radius_range: Tuple[float, float] = (24.0, 88.0)
    boundary_band: float = 7.0
    tissue_radius_fraction: Tuple[float, float] = (0.36, 0.42)
    tissue_threshold: float = 0.9
    noise_level: float = 1.2
    texture_cells: int = 16

    def __post_init__(self):
        if self.size < 4 * self.tile_size:
            raise SlideError(f"slide size {self.size} below 4 tile lengths")
        if self.size % self.tile_size != 0:
            raise SlideError("slide size must be a multiple of the tile size")
        if self.lesion_count < 0:
            raise SlideError("lesion count must be >= 0")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise SlideError("bad lesion radius range")
        # a lesion plus its wobble and band must fit inside the tissue blob
        reach = hi * 1.2 + self.boundary_band
        if reach > self.tissue_radius_fraction[0] * self.size * 0.8:
            raise SlideError("lesion radii do not fit inside the tissue region")
        min_reach = lo + self.boundary_band
        if 2.0 * (self.tile_size + min_reach + 2.0) >= self.size:
            raise SlideError("slide too small for the edge-distance guarantee")
        if not 0.0 <= self.tissue_threshold <= 1.0:
            raise SlideError("tissue threshold outside [0, 1]")


@dataclass
class SyntheticSlide:
    image: np.ndarray  # S x S x 3 float64, integer-valued in [0, 255]
    lesion_mask: np.ndarray  # S x S bool
    label: int
    seed: int
    lesion_count: int


def _smooth_field(rng: np.random.Generator, size: int, cells: int,
                  lo: float, hi: float) -> np.ndarray:
    """Bilinear interpolation of a coarse random grid; values in [lo, hi]."""
    coarse = rng.uniform(lo, hi, size=(cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    frac = pos - i0
    top = coarse[i0][:, i0] * (1 - frac)[None, :] + coarse[i0][:, i0 + 1] * frac[None, :]
    bot = coarse[i0 + 1][:, i0] * (1 - frac)[None, :] + coarse[i0 + 1][:, i0 + 1] * frac[None, :]
    return top * (1 - frac)[:, None] + bot * frac[:, None]


def _wobbly_radius(theta: np.ndarray, base: float, amps: np.ndarray,
                   phases: np.ndarray) -> np.ndarray:
    r = np.full_like(theta, float(base))
    for k, (a, p) in enumerate(zip(amps, phases), start=2):
        r += base * a * np.sin(k * theta + p)
    return r


def generate_slide(seed: int, params: SlideParams = SlideParams()) -> SyntheticSlide:
    """Deterministic slide for a seed; label is 1 iff lesion_count > 0."""
    size = params.size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # tissue blob
    center = size / 2.0 + rng.uniform(-0.03, 0.03, size=2) * size
    base_r = rng.uniform(*params.tissue_radius_fraction) * size
    t_amps = rng.uniform(0.0, 0.05, size=5)
    t_phases = rng.uniform(0.0, 2.0 * np.pi, size=5)
    dy = yy - center[0]
    dx = xx - center[1]
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    tissue = dist <= _wobbly_radius(theta, base_r, t_amps, t_phases)

    # stain concentration textures
    cells = params.texture_cells
    c_h_tissue = _smooth_field(rng, size, cells, 0.18, 0.32)
    c_e_tissue = _smooth_field(rng, size, cells, 0.40, 0.60)
    c_h_lesion = _smooth_field(rng, size, cells, 0.75, 1.05)
    c_e_lesion = _smooth_field(rng, size, cells, 0.28, 0.42)

    # lesion blobs with graded boundary band; the tissue region grows a
    # padded lobe around each accepted lesion, so lesions can sit near the
    # tissue boundary (outward-biased placement) and still lie fully inside
    # tissue, with every touched tile clearing the keep threshold
    alpha = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    band = params.boundary_band
    tile = params.tile_size
    pad = band + 6.0
    n_grid = size // tile
    for blob in range(params.lesion_count):
        # after the first few blobs, aim at solid-tissue tiles that no
        # lesion has reached yet, so coverage spreads across the kept grid
        gaps = []
        if blob >= 2:
            for ti in range(n_grid):
                for tj in range(n_grid):
                    ys, xs = ti * tile, tj * tile
                    if tissue[ys:ys + tile, xs:xs + tile].mean() < params.tissue_threshold:
                        continue
                    if mask[ys:ys + tile, xs:xs + tile].any():
                        continue
                    gaps.append((ys + tile / 2.0, xs + tile / 2.0))
        placed = False
        for attempt in range(200):
            r0 = rng.uniform(*params.lesion_radius_range)
            amps = rng.uniform(0.0, 0.12, size=4)
            phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
            reach = r0 * (1.0 + float(amps.sum())) + band
            # a full tile length between any lesion pixel and the slide edge
            margin = float(tile) + reach + 2.0
            if 2.0 * margin >= size:
                continue
            if gaps and attempt < 120:
                gy, gx = gaps[int(rng.integers(len(gaps)))]
                cy = gy + rng.uniform(-tile / 2.0, tile / 2.0)
                cx = gx + rng.uniform(-tile / 2.0, tile / 2.0)
                if not (margin <= cy <= size - margin and margin <= cx <= size - margin):
                    continue
            elif attempt < 120:
                # radial draw biased toward the tissue rim (exponent < 1/2
                # puts more mass outward than an area-uniform draw would)
                d = base_r * rng.uniform() ** 0.35
                phi = rng.uniform(0.0, 2.0 * np.pi)
                cy = center[0] + d * np.sin(phi)
                cx = center[1] + d * np.cos(phi)
                if not (margin <= cy <= size - margin and margin <= cx <= size - margin):
                    continue
            else:
                # fallback keeps placement feasible on small slides
                cy = rng.uniform(margin, size - margin)
                cx = rng.uniform(margin, size - margin)
            # rasterize on the bounding box of the padded tissue lobe
            ext = reach + pad
            y0 = max(0, int(np.floor(cy - ext)))
            y1 = min(size, int(np.ceil(cy + ext)) + 1)
            x0 = max(0, int(np.floor(cx - ext)))
            x1 = min(size, int(np.ceil(cx + ext)) + 1)
            ly = yy[y0:y1, x0:x1] - cy
            lx = xx[y0:y1, x0:x1] - cx
            bd = np.hypot(ly, lx)
            br = _wobbly_radius(np.arctan2(ly, lx), r0, amps, phases)
            blob_alpha = np.clip(0.5 + (br - bd) / band, 0.0, 1.0)
            blob_mask = bd <= br
            if not blob_mask.any():
                continue
            cand = tissue.copy()
            cand[y0:y1, x0:x1] |= bd <= br + pad
            # every base-grid tile this lesion touches must be solidly tissue
            rows, cols = np.nonzero(blob_mask)
            touched = sorted(set(zip((rows + y0) // tile, (cols + x0) // tile)))
            ok = True
            for ti, tj in touched:
                patch = cand[ti * tile:(ti + 1) * tile, tj * tile:(tj + 1) * tile]
                if patch.mean() < params.tissue_threshold:
                    ok = False
                    break
            if not ok:
                continue
            tissue = cand
            alpha[y0:y1, x0:x1] = np.maximum(alpha[y0:y1, x0:x1], blob_alpha)
            mask[y0:y1, x0:x1] |= blob_mask
            placed = True
            break
        if not placed:
            raise SlideError(
                f"could not place lesion {blob + 1}/{params.lesion_count} "
                f"for seed {seed}; loosen radii or enlarge tissue")

    # transmitted-light image from the two-stain mixture
    c_h = np.where(tissue, c_h_tissue * (1.0 - alpha) + c_h_lesion * alpha, 0.0)
    c_e = np.where(tissue, c_e_tissue * (1.0 - alpha) + c_e_lesion * alpha, 0.0)
    od = c_h[:, :, None] * STAIN_H + c_e[:, :, None] * STAIN_E
    image = 255.0 * np.exp(-od)
    image += rng.uniform(-params.noise_level, params.noise_level, size=image.shape)
    image = np.clip(np.round(image), 0.0, 255.0)

    # the background rule must agree with the geometry exactly
    channel_mean = image.mean(axis=2)
    if np.any(tissue & (channel_mean > BACKGROUND_MEAN_THRESHOLD - 1.0)):
        raise SlideError("tissue pixel too bright; raise concentration floors")
    if np.any(~tissue & (channel_mean <= BACKGROUND_MEAN_THRESHOLD)):
        raise SlideError("background pixel too dark; lower noise level")

    label = int(mask.any())
    if label != int(params.lesion_count > 0):
        raise SlideError("label/mask inconsistency")  # unreachable by construction
    return SyntheticSlide(image=image, lesion_mask=mask, label=label,
                          seed=int(seed), lesion_count=params.lesion_count)
