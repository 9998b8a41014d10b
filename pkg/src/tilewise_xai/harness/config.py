"""Experiment configuration: TOML schema, key=value overrides, resolved dumps.

The config file is a TOML document with fixed sections; unknown sections or
keys are rejected so typos cannot silently fall back to defaults. Every run
writes the fully resolved configuration next to its outputs, and that dump
parses back to the identical config.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Sequence, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomlkit

from ..synthdata.dataio import DatasetSpec
from ..synthdata.slides import SlideError, SlideParams
from ..synthdata.tiling import GridSpec, TilingError
from ..xai import AGGREGATORS, UPSCALE_MODES, XaiConfig, XaiError


class ConfigError(ValueError):
    """Malformed TOML, unknown key, or invalid value."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, validated view of one experiment's settings."""

    # [run]
    seed: int = 7
    out_dir: str = ""
    threads: int = 1
    # [data]
    slides_train: int = 30
    slides_val: int = 8
    slides_test: int = 16
    slide_size: int = 512
    tile_size: int = 64
    lesion_count_min: int = 12
    lesion_count_max: int = 16
    lesion_radius_min: float = 24.0
    lesion_radius_max: float = 88.0
    # [mil]
    mil_pretrain_epochs: int = 2
    mil_pretrain_lr: float = 0.01
    mil_epochs: int = 2
    mil_lr: float = 0.05
    mil_aux_positive_fraction: float = 0.05
    mil_model_seed: int = 0
    # [seg]
    seg_base_width: int = 8
    seg_epochs: int = 4
    seg_lr: float = 0.05
    seg_model_seed: int = 0
    # [xai]
    xai_layers: Tuple[int, ...] = (2, 4, 6, 8)
    xai_upscale: str = "nearest"
    xai_per_layer_rescale: bool = False
    thresholds: Tuple[float, ...] = (0.5, 0.8, 0.9, 0.95)
    # [stability]
    prediction_floor: float = 0.2
    stability_threshold: float = 0.9
    stability_aggregator: str = "abs"

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        for name in ("slides_train", "slides_val", "slides_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be >= 0")
        if not 1 <= self.lesion_count_min <= self.lesion_count_max:
            raise ConfigError("data lesion count range must satisfy 1 <= min <= max")
        for name in ("mil_pretrain_lr", "mil_lr", "seg_lr"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name.replace('_', '.', 1)} must be > 0")
        for name in ("mil_pretrain_epochs", "mil_epochs", "seg_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name.replace('_', '.', 1)} must be >= 0")
        if not 0.0 <= self.mil_aux_positive_fraction <= 1.0:
            raise ConfigError("mil.aux_positive_fraction outside [0, 1]")
        if self.seg_base_width < 1:
            raise ConfigError("seg.base_width must be >= 1")
        if not self.thresholds:
            raise ConfigError("xai.thresholds must not be empty")
        for t in self.thresholds:
            if not 0.0 <= t < 1.0:
                raise ConfigError(f"threshold {t} outside [0, 1)")
        if len(set(self.thresholds)) != len(self.thresholds):
            raise ConfigError("duplicate thresholds")
        if not 0.0 <= self.prediction_floor < 1.0:
            raise ConfigError("stability.prediction_floor outside [0, 1)")
        if not 0.0 <= self.stability_threshold < 1.0:
            raise ConfigError("stability.threshold outside [0, 1)")
        if self.stability_aggregator not in AGGREGATORS:
            raise ConfigError(
                f"stability.aggregator must be one of {AGGREGATORS}")
        if self.xai_upscale not in UPSCALE_MODES:
            raise ConfigError(f"xai.upscale must be one of {UPSCALE_MODES}")
        if not self.xai_layers:
            raise ConfigError("xai.layers must not be empty")
        # the checks the downstream value objects enforce, surfaced early
        try:
            XaiConfig(layers=self.xai_layers, aggregator=self.stability_aggregator,
                      upscale=self.xai_upscale, thresholds=self.thresholds,
                      per_layer_rescale=self.xai_per_layer_rescale)
            SlideParams(size=self.slide_size, tile_size=self.tile_size,
                        lesion_radius_range=(self.lesion_radius_min,
                                             self.lesion_radius_max))
            GridSpec(tile_size=self.tile_size)
        except (XaiError, SlideError, TilingError) as exc:
            raise ConfigError(str(exc)) from exc

    # ------------------------------------------------------------------
    # derived value objects

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            seed=self.seed,
            slides_train=self.slides_train,
            slides_val=self.slides_val,
            slides_test=self.slides_test,
            lesion_count_range=(self.lesion_count_min, self.lesion_count_max),
            params=SlideParams(size=self.slide_size, tile_size=self.tile_size,
                               lesion_radius_range=(self.lesion_radius_min,
                                                    self.lesion_radius_max)),
        )

    def grid_spec(self, shift: Tuple[int, int] = (0, 0)) -> GridSpec:
        return GridSpec(tile_size=self.tile_size, shift=shift,
                        tissue_threshold=self.dataset_spec().params.tissue_threshold)

    def xai_config(self, aggregator: str) -> XaiConfig:
        return XaiConfig(layers=self.xai_layers, aggregator=aggregator,
                         upscale=self.xai_upscale, thresholds=self.thresholds,
                         per_layer_rescale=self.xai_per_layer_rescale)


# section -> key -> config field name; drives parsing, overrides and dumps
SCHEMA: Dict[str, Dict[str, str]] = {
    "run": {"seed": "seed", "out_dir": "out_dir", "threads": "threads"},
    "data": {
        "slides_train": "slides_train",
        "slides_val": "slides_val",
        "slides_test": "slides_test",
        "slide_size": "slide_size",
        "tile_size": "tile_size",
        "lesion_count_min": "lesion_count_min",
        "lesion_count_max": "lesion_count_max",
        "lesion_radius_min": "lesion_radius_min",
        "lesion_radius_max": "lesion_radius_max",
    },
    "mil": {
        "pretrain_epochs": "mil_pretrain_epochs",
        "pretrain_lr": "mil_pretrain_lr",
        "epochs": "mil_epochs",
        "lr": "mil_lr",
        "aux_positive_fraction": "mil_aux_positive_fraction",
        "model_seed": "mil_model_seed",
    },
    "seg": {
        "base_width": "seg_base_width",
        "epochs": "seg_epochs",
        "lr": "seg_lr",
        "model_seed": "seg_model_seed",
    },
    "xai": {
        "layers": "xai_layers",
        "upscale": "xai_upscale",
        "per_layer_rescale": "xai_per_layer_rescale",
        "thresholds": "thresholds",
    },
    "stability": {
        "prediction_floor": "prediction_floor",
        "threshold": "stability_threshold",
        "aggregator": "stability_aggregator",
    },
}

_DEFAULTS = {f.name: f.default for f in fields(ExperimentConfig)}


def _coerce_toml(section: str, key: str, value, default):
    """Validate a parsed TOML value against the default's type."""
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        elem = default[0] if default else 0.0
        return tuple(_coerce_toml(section, key, v, elem) for v in value)
    raise ConfigError(f"{where}: unsupported value type")  # pragma: no cover


def _coerce_string(section: str, key: str, text: str, default):
    """Parse a command-line override value against the default's type."""
    where = f"{section}.{key}"
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from exc
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from exc
    if isinstance(default, str):
        return text
    if isinstance(default, tuple):
        elem = default[0] if default else 0.0
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(_coerce_string(section, key, p.strip(), elem) for p in parts)
    raise ConfigError(f"{where}: unsupported value type")  # pragma: no cover


def apply_overrides(values: Dict[str, object], overrides: Sequence[str]) -> None:
    """Apply `section.key=value` strings onto a flat field dict, in order."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, _, text = item.partition("=")
        if dotted.count(".") != 1:
            raise ConfigError(f"override key {dotted!r} is not of the form section.key")
        section, key = dotted.split(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key '{dotted}'")
        field = SCHEMA[section][key]
        values[field] = _coerce_string(section, key, text, _DEFAULTS[field])


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Config from an optional TOML file plus overrides; defaults otherwise."""
    values: Dict[str, object] = {}
    if path is not None:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            doc = tomllib.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        for section, table in doc.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section '{section}'")
            if not isinstance(table, dict):
                raise ConfigError(f"section '{section}' must be a table")
            for key, value in table.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key '{section}.{key}'")
                field = SCHEMA[section][key]
                values[field] = _coerce_toml(section, key, value, _DEFAULTS[field])
    apply_overrides(values, overrides)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolved_toml(config: ExperimentConfig) -> str:
    """The full configuration as TOML text; parses back to `config`."""
    doc = tomlkit.document()
    for section, keys in SCHEMA.items():
        table = tomlkit.table()
        for key, field in keys.items():
            value = getattr(config, field)
            if isinstance(value, tuple):
                value = list(value)
            table[key] = value
        doc[section] = table
    return tomlkit.dumps(doc)


def write_resolved(config: ExperimentConfig, directory) -> Path:
    """Dump the resolved config next to a run's outputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.resolved.toml"
    path.write_text(resolved_toml(config))
    return path
