"""Result persistence: versioned CSV tables, JSON summaries, parallel map.

Writers are fully deterministic: fixed column order, repr-based float
formatting, sorted JSON keys, no timestamps. The first CSV line is a schema
comment so readers can detect layout changes.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, Mapping, Optional, Sequence

SCORES_SCHEMA = "scores-v1"
STABILITY_SCHEMA = "stability-v1"
SUMMARY_SCHEMA = "summary-v1"

SCORES_COLUMNS = (
    "tile_id", "slide_seed", "aggregator", "threshold", "gt_source",
    "hit", "precision", "popcount", "iou", "prediction",
    "annotated_fraction", "excluded",
)

STABILITY_COLUMNS = (
    "slide_seed", "grid_a", "grid_b", "tile_a", "tile_b",
    "delta_x", "delta_y", "overlap_x0", "overlap_y0", "overlap_x1", "overlap_y1",
    "overlap_area", "overlap_fraction", "prediction_a", "prediction_b",
    "prediction_diff", "area_fraction_a", "area_fraction_b", "iou", "excluded",
)


class ReportError(ValueError):
    """Row does not match the declared schema."""


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, schema: str, columns: Sequence[str],
              rows: Iterable[Mapping[str, object]]) -> Path:
    """Write rows in fixed column order with a schema comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            extra = set(row) - set(columns)
            if extra:
                raise ReportError(f"row has columns outside the schema: {sorted(extra)}")
            writer.writerow([_format_cell(row.get(c)) for c in columns])
    return path


def read_csv(path) -> List[dict]:
    """Read a schema-stamped CSV back into dicts (all values as strings)."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema: "):
            raise ReportError(f"{path} is missing the schema comment line")
        return list(csv.DictReader(fh))


def write_json(path, payload: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    """Map preserving input order; threads=1 degenerates to a plain loop."""
    if threads < 1:
        raise ValueError("threads must be >= 1")
    items = list(items)
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
