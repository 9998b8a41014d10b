"""Stain color handling: optical-density transform, stain-basis estimation,
normalization to a reference profile, and random stain perturbation.

Normalization follows the classic recipe: convert to optical density,
discard near-white pixels, find the 2-d plane of largest variance, take
robust angular extremes in that plane as the two stain vectors, express
every pixel as stain concentrations, rescale concentration percentiles to
the reference, and reconstruct. Degenerate tiles (no tissue, single stain
direction) do not raise; they come back unchanged with a failure flag so
batch pipelines can skip them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

LIGHT_REFERENCE = 255.0  # transmitted light level for the OD transform
OD_PIXEL_FLOOR = 0.5  # pixels clamped here before the log
DEFAULT_BETA = 0.15  # OD below this in any channel counts as near-white
ANGLE_PERCENTILES = (1.0, 99.0)
CONCENTRATION_PERCENTILE = 99.0
MIN_TISSUE_PIXELS = 64


class StainError(ValueError):
    """Tile unsuitable for stain estimation (no tissue, degenerate colors)."""


@dataclass(frozen=True)
class StainProfile:
    """Fitted stain basis (3x2, columns are unit stain OD vectors, first
    column is the hematoxylin-like stain) and robust max concentrations."""

    basis: np.ndarray
    max_conc: np.ndarray


@dataclass
class NormalizationResult:
    image: np.ndarray
    failed: bool
    reason: Optional[str] = None


def rgb_to_od(image: np.ndarray) -> np.ndarray:
    """Optical density per channel; brighter pixels have lower density."""
    arr = np.asarray(image, dtype=np.float64)
    return -np.log(np.maximum(arr, OD_PIXEL_FLOOR) / LIGHT_REFERENCE)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.clip(LIGHT_REFERENCE * np.exp(-np.asarray(od, dtype=np.float64)),
                   0.0, 255.0)


def _plane_and_extremes(od_tissue: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Two stain direction vectors from the OD cloud's principal plane."""
    cov = np.cov(od_tissue.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] < 1e-10:
        raise StainError("optical densities are nearly one-dimensional")
    plane = eigvecs[:, 1:3]  # two largest eigenvalues (ascending order)
    proj = od_tissue @ plane
    # orient the plane so the cloud sits around angle 0, away from the wrap
    for col in range(2):
        if proj[:, col].sum() < 0.0:
            plane[:, col] = -plane[:, col]
            proj[:, col] = -proj[:, col]
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(angles, ANGLE_PERCENTILES)
    if hi - lo < 1e-4:
        raise StainError("single stain direction (no angular spread)")
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    return v_lo, v_hi


def macenko_fit(image: np.ndarray, beta: float = DEFAULT_BETA) -> StainProfile:
    """Estimate the tile's stain basis and robust max concentrations.

    Raises StainError on degenerate input; `macenko_normalize` converts that
    into a flagged pass-through result.
    """
    od = rgb_to_od(image).reshape(-1, 3)
    tissue = od[np.all(od >= beta, axis=1)]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise StainError(
            f"too few tissue pixels ({tissue.shape[0]} < {MIN_TISSUE_PIXELS})")
    v_lo, v_hi = _plane_and_extremes(tissue)
    # hematoxylin-like stain has the larger red-channel density
    if v_lo[0] >= v_hi[0]:
        basis = np.stack([v_lo, v_hi], axis=1)
    else:
        basis = np.stack([v_hi, v_lo], axis=1)
    conc, *_ = np.linalg.lstsq(basis, tissue.T, rcond=None)
    max_conc = np.percentile(conc, CONCENTRATION_PERCENTILE, axis=1)
    if np.any(max_conc < 1e-6):
        raise StainError("vanishing stain concentration")
    return StainProfile(basis=basis, max_conc=max_conc)


def macenko_normalize(image: np.ndarray, reference: StainProfile,
                      beta: float = DEFAULT_BETA) -> NormalizationResult:
    """Re-express a tile in the reference stain basis and intensity range.

    Failures (all-white tile, rank-deficient colors) return the input
    unchanged with `failed=True` and a reason, never an exception.
    """
    image = np.asarray(image, dtype=np.float64)
    try:
        fitted = macenko_fit(image, beta)
    except StainError as exc:
        return NormalizationResult(image=image.copy(), failed=True, reason=str(exc))
    od = rgb_to_od(image).reshape(-1, 3)
    conc, *_ = np.linalg.lstsq(fitted.basis, od.T, rcond=None)
    conc *= (reference.max_conc / fitted.max_conc)[:, None]
    od_new = (reference.basis @ conc).T.reshape(image.shape)
    return NormalizationResult(image=od_to_rgb(od_new), failed=False)


def stain_perturb(image: np.ndarray, seed: int, mix_strength: float = 0.08,
                  brightness_range: Tuple[float, float] = (0.92, 1.08)) -> np.ndarray:
    """Random invertible 3x3 color mixing plus brightness jitter.

    Deterministic for a seed; output is integer-valued in [0, 255] like the
    generator's slides.
    """
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mix = None
    for _ in range(32):
        candidate = np.eye(3) + rng.uniform(-mix_strength, mix_strength, size=(3, 3))
        if abs(np.linalg.det(candidate)) >= 0.2:
            mix = candidate
            break
    if mix is None:
        raise StainError("could not draw an invertible color mixing matrix")
    brightness = rng.uniform(*brightness_range)
    out = brightness * (image @ mix.T)
    return np.clip(np.round(out), 0.0, 255.0)
