"""Dataset persistence: slides as PNG + PGM + JSON sidecar, plus a manifest
describing train/val/test splits by seed range.

Slide images are integer-valued by construction, so the PNG round-trip is
lossless. Split membership and labels are pure functions of the dataset
seed, which keeps regeneration deterministic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List

import numpy as np
from PIL import Image

from .slides import SlideParams, SyntheticSlide, generate_slide

SPLIT_NAMES = ("train", "val", "test")


class DataError(ValueError):
    """Lossy image payload, malformed dataset file, or bad manifest."""


# ---------------------------------------------------------------------------
# image files


def save_png(path, image: np.ndarray) -> None:
    """Lossless save; the array must already be integer-valued in [0, 255]."""
    arr = np.asarray(image, dtype=np.float64)
    rounded = np.round(arr)
    if not np.array_equal(arr, rounded) or arr.min() < 0 or arr.max() > 255:
        raise DataError("image must be integer-valued in [0, 255] for lossless PNG")
    Image.fromarray(rounded.astype(np.uint8)).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64)


def save_mask_pgm(path, mask: np.ndarray) -> None:
    """Binary mask as a P5 PGM, positives stored as 255."""
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise DataError("mask must be boolean")
    h, w = mask.shape
    payload = (mask.astype(np.uint8) * 255).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + payload)


def load_mask_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise DataError(f"not a supported PGM file: {path}")
    w, h = (int(v) for v in parts[1].split())
    data = parts[3]
    if len(data) != w * h:
        raise DataError(f"PGM payload size mismatch in {path}")
    return (np.frombuffer(data, dtype=np.uint8).reshape(h, w) > 127)


def save_gray_png(path, values: np.ndarray) -> None:
    """8-bit grayscale image (heatmap export)."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise DataError("grayscale export expects uint8 values")
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# slides on disk


def save_slide(directory, slide: SyntheticSlide, params: SlideParams) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_png(directory / "image.png", slide.image)
    save_mask_pgm(directory / "mask.pgm", slide.lesion_mask)
    sidecar = {
        "seed": slide.seed,
        "label": slide.label,
        "lesion_count": slide.lesion_count,
        "params": asdict(params),
    }
    (directory / "meta.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_slide(directory) -> SyntheticSlide:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read slide sidecar in {directory}: {exc}") from exc
    image = load_png(directory / "image.png")
    mask = load_mask_pgm(directory / "mask.pgm")
    return SyntheticSlide(image=image, lesion_mask=mask,
                          label=int(meta["label"]), seed=int(meta["seed"]),
                          lesion_count=int(meta["lesion_count"]))


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetSpec:
    """Dataset layout. `negative_every` gives, per split in (train, val,
    test) order, the stride of lesion-free slides: every k-th slide is
    negative, 0 means none. The default keeps train/val balanced while the
    test split holds only lesioned slides, since that is where per-tile
    explanation scoring happens; slide-level ROC uses the mixed val split."""

    seed: int = 7
    slides_train: int = 30
    slides_val: int = 8
    slides_test: int = 16
    lesion_count_range: tuple = (12, 16)
    negative_every: tuple = (2, 2, 0)
    params: SlideParams = SlideParams()

    def split_sizes(self) -> Dict[str, int]:
        return {"train": self.slides_train, "val": self.slides_val,
                "test": self.slides_test}

    def negative_stride(self, split: str) -> int:
        return int(self.negative_every[SPLIT_NAMES.index(split)])


def slide_seed_ranges(spec: DatasetSpec) -> Dict[str, range]:
    """Disjoint contiguous seed ranges per split, derived from the seed."""
    base = (spec.seed + 1) * 100000
    sizes = spec.split_sizes()
    out: Dict[str, range] = {}
    start = base
    for name in SPLIT_NAMES:
        out[name] = range(start, start + sizes[name])
        start += sizes[name]
    return out


def plan_slide(spec: DatasetSpec, split: str, index: int, slide_seed: int
               ) -> SlideParams:
    """Label and lesion count for one slide within its split."""
    stride = spec.negative_stride(split)
    if stride > 0 and index % stride == 0:
        return replace(spec.params, lesion_count=0)
    lo, hi = spec.lesion_count_range
    count = lo + (slide_seed % (hi - lo + 1))
    return replace(spec.params, lesion_count=int(count))


def generate_dataset(root, spec: DatasetSpec) -> dict:
    """Write every slide plus a manifest; returns the manifest mapping."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ranges = slide_seed_ranges(spec)
    manifest: dict = {
        "dataset_seed": spec.seed,
        "lesion_count_range": list(spec.lesion_count_range),
        "negative_every": list(spec.negative_every),
        "slide_params": asdict(spec.params),
        "splits": {},
    }
    for split in SPLIT_NAMES:
        entries: List[dict] = []
        for index, slide_seed in enumerate(ranges[split]):
            params = plan_slide(spec, split, index, slide_seed)
            slide = generate_slide(slide_seed, params)
            rel = f"{split}/slide_{slide_seed}"
            save_slide(root / rel, slide, params)
            entries.append({
                "seed": slide_seed,
                "label": slide.label,
                "lesion_count": slide.lesion_count,
                "path": rel,
            })
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root) -> dict:
    root = Path(root)
    try:
        return json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest under {root}: {exc}") from exc


def load_split(root, manifest: dict, split: str) -> List[SyntheticSlide]:
    if split not in manifest.get("splits", {}):
        raise DataError(f"manifest has no split '{split}'")
    return [load_slide(Path(root) / entry["path"])
            for entry in manifest["splits"][split]]
