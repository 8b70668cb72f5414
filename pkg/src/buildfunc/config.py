"""Run configuration: one JSON file, overridable from the command line."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import BuildFuncError, ConfigError, IoError
from .evaluation import KdeParams
from .ingest import BlockConfig, IngestConfig
from .labeling import CorrectionParams, Stage1Params, Stage2Params

DEFAULTS = {
    "paths": {"footprints": None, "pois": None, "taxonomy": None, "blocks": None,
              "high_level": None, "scene": None},
    "ingest": {"id_field": "id", "block_field": "block_id", "category_field": "category",
               "high_level_field": "high_level", "radius_field": "buffer_radius",
               "x_field": "x", "y_field": "y", "block_grid_size": 500.0,
               "check_simple": True},
    "stage1": {"alpha": 0.5, "d_max": 50.0},
    "stage2": {"k": 7, "max_iterations": 10, "convergence_epsilon": 0.0},
    "stage3": {"conflict_rule": "nearest_poi", "membership_test": "centroid"},
    "kde": {"bandwidth": 200.0, "cell_size": 20.0, "epsilon": 1e-9, "padding": None},
    "w": 0.5,
    "output_dir": "out",
    "thread_count": 0,
    "synth": {"nx": 3, "ny": 3, "zone_size": 300.0, "gap": 90.0, "buildings_per_zone": 100,
              "pois_per_building": 1.0, "poi_noise_rate": 0.0, "poi_jitter": 0.0,
              "high_level": [], "block_grid_size": 500.0, "classes": None, "seed": 0},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def parse_override(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Set dotted keys like ``stage2.k`` on a raw config dictionary."""
    out = copy.deepcopy(raw)
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted}")
        node[parts[-1]] = value
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: Optional[str], overrides: Optional[dict] = None) -> "RunConfig":
        data, base = {}, Path.cwd()
        if path:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
            base = Path(path).resolve().parent
        raw = apply_overrides(_merge(DEFAULTS, data), overrides or {})
        cfg = cls(raw, base)
        cfg.validate_params()
        return cfg

    def path(self, key: str) -> Optional[Path]:
        value = self.raw["paths"].get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require(self, *keys: str) -> None:
        for key in keys:
            p = self.path(key)
            if p is None:
                raise ConfigError(f"paths.{key} is required")
            if not p.exists():
                raise IoError(f"paths.{key}: {p} does not exist")
        for key in ("taxonomy", "blocks", "high_level", "scene"):
            p = self.path(key)
            if p is not None and not p.exists():
                raise IoError(f"paths.{key}: {p} does not exist")

    # typed views; constructing them validates ranges before any compute

    def validate_params(self) -> None:
        try:
            self.stage1, self.stage2, self.stage3, self.kde
            self.ingest_config(with_files=False)
            w = float(self.raw["w"])
            if not 0.0 <= w <= 1.0:
                raise ConfigError(f"w must be in [0, 1], got {w}")
            if int(self.raw["thread_count"]) < 0:
                raise ConfigError("thread_count must be >= 0")
        except BuildFuncError as exc:
            raise ConfigError(str(exc)) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid parameter: {exc}") from None

    @property
    def stage1(self) -> Stage1Params:
        return Stage1Params(**self.raw["stage1"])

    @property
    def stage2(self) -> Stage2Params:
        return Stage2Params(**self.raw["stage2"])

    @property
    def stage3(self) -> CorrectionParams:
        return CorrectionParams(**self.raw["stage3"])

    @property
    def kde(self) -> KdeParams:
        return KdeParams(**self.raw["kde"])

    @property
    def w(self) -> float:
        return float(self.raw["w"])

    @property
    def threads(self) -> int:
        n = int(self.raw["thread_count"])
        return n if n > 0 else (os.cpu_count() or 1)

    @property
    def output_dir(self) -> Path:
        p = Path(self.raw["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def ingest_config(self, with_files: bool = True) -> IngestConfig:
        ing = dict(self.raw["ingest"])
        grid = float(ing.pop("block_grid_size"))
        blocks = self.path("blocks") if with_files else None
        high = self.path("high_level") if with_files else None
        return IngestConfig(**ing, blocks=BlockConfig(grid),
                            blocks_path=None if blocks is None else str(blocks),
                            high_level_path=None if high is None else str(high))

    def snapshot(self) -> dict:
        """Parameters that determine results (no paths, threads or output dir)."""
        return {k: copy.deepcopy(self.raw[k])
                for k in ("ingest", "stage1", "stage2", "stage3", "kde", "w")}
