"""Seeded synthetic cities with known building functions.

Random numbers come from numpy's PCG64 bit generator and are consumed only
through ``Generator.random()`` (uniform doubles built from the raw 64-bit
stream), so a seed yields the same scene on every platform. Gaussian jitter
uses an explicit Box-Muller transform for the same reason.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidLayout
from .geometry import Polygon
from .ingest import BlockConfig, Scene, make_scene, write_scene_files
from .model import BuildingFootprint, FunctionClass, PoiRecord

# one representative raw category per class, all present in the default taxonomy
RAW_CATEGORY = {
    FunctionClass.RESIDENTIAL: "Real Estate",
    FunctionClass.COMMERCIAL: "Shopping",
    FunctionClass.PUBLIC_SERVICES: "Healthcare",
    FunctionClass.TECHNOLOGY_INDUSTRY: "Companies and Enterprises",
    FunctionClass.EDUCATIONAL_CULTURAL: "Education and Training Venue",
}


@dataclass(frozen=True)
class Zone:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    function_class: FunctionClass

    @property
    def center(self) -> tuple[float, float]:
        return ((self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2)


@dataclass(frozen=True)
class HighLevelSpec:
    """A landmark POI at ``zone``'s center (plus ``offset``) with a buffer."""

    zone: int
    function_class: FunctionClass
    radius: float
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    zones: tuple[Zone, ...] = ()
    buildings_per_zone: int = 100
    pois_per_building: float = 1.0
    poi_noise_rate: float = 0.0
    poi_jitter: float = 0.0
    high_level: tuple[HighLevelSpec, ...] = ()
    building_fill: tuple[float, float] = (0.5, 0.8)
    block_grid_size: float = 500.0

    @classmethod
    def grid(cls, nx: int, ny: int, zone_size: float = 300.0, gap: float = 90.0,
             seed: int = 0, classes: Optional[list] = None, **kw) -> "SynthConfig":
        """``nx`` x ``ny`` square zones separated by ``gap`` meters.

        Zone classes are drawn from the seed unless ``classes`` is given.
        """
        rng = _rng(seed ^ 0x5EED)
        zones = []
        for j in range(ny):
            for i in range(nx):
                k = len(zones)
                if classes is not None:
                    fc = FunctionClass.parse(classes[k % len(classes)])
                else:
                    fc = FunctionClass(int(rng.random() * 5) + 1)
                x0 = i * (zone_size + gap)
                y0 = j * (zone_size + gap)
                zones.append(Zone(x0, y0, x0 + zone_size, y0 + zone_size, fc))
        return cls(seed=seed, zones=tuple(zones), **kw)

    def validate(self) -> None:
        if not self.zones:
            raise InvalidLayout("no zones")
        for z in self.zones:
            if not (z.xmax > z.xmin and z.ymax > z.ymin):
                raise InvalidLayout(f"degenerate zone {z}")
        for a in range(len(self.zones)):
            for b in range(a + 1, len(self.zones)):
                za, zb = self.zones[a], self.zones[b]
                if (min(za.xmax, zb.xmax) > max(za.xmin, zb.xmin)
                        and min(za.ymax, zb.ymax) > max(za.ymin, zb.ymin)):
                    raise InvalidLayout(f"zones {a} and {b} overlap")
        if self.buildings_per_zone < 1:
            raise InvalidLayout("buildings_per_zone must be >= 1")
        if not self.pois_per_building >= 0:
            raise InvalidLayout("pois_per_building must be >= 0")
        if not 0.0 <= self.poi_noise_rate < 1.0:
            raise InvalidLayout("poi_noise_rate must be in [0, 1)")
        if not self.poi_jitter >= 0:
            raise InvalidLayout("poi_jitter must be >= 0")
        lo, hi = self.building_fill
        if not 0 < lo <= hi < 1:
            raise InvalidLayout("building_fill must satisfy 0 < lo <= hi < 1")
        for spec in self.high_level:
            if not 0 <= spec.zone < len(self.zones):
                raise InvalidLayout(f"high-level spec refers to missing zone {spec.zone}")
            if not spec.radius > 0:
                raise InvalidLayout("high-level radius must be > 0")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & (2 ** 64 - 1)))


def _gauss(rng) -> float:
    u1 = 1.0 - rng.random()
    u2 = rng.random()
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


GroundTruth = dict  # building id -> FunctionClass


def generate_scene(config: SynthConfig) -> tuple[Scene, GroundTruth]:
    """Lay out rectangular buildings per zone and scatter POIs into them.

    Each building gets ``floor(m) + Bernoulli(m - floor(m))`` POIs for mean
    ``m = pois_per_building``; each POI carries the zone's class, swapped for
    a uniformly chosen wrong class with probability ``poi_noise_rate``.
    """
    config.validate()
    rng = _rng(config.seed)
    lo, hi = config.building_fill
    buildings, pois, truth = [], [], {}
    base = int(math.floor(config.pois_per_building))
    extra_p = config.pois_per_building - base
    for z in config.zones:
        n = config.buildings_per_zone
        cols = math.ceil(math.sqrt(n))
        rows = math.ceil(n / cols)
        cw = (z.xmax - z.xmin) / cols
        ch = (z.ymax - z.ymin) / rows
        for j in range(n):
            r, c = divmod(j, cols)
            fw = lo + (hi - lo) * rng.random()
            fh = lo + (hi - lo) * rng.random()
            w, h = fw * cw, fh * ch
            # shift within the cell while keeping the building inside it
            ox = (rng.random() - 0.5) * (cw - w) * 0.5
            oy = (rng.random() - 0.5) * (ch - h) * 0.5
            cx = z.xmin + (c + 0.5) * cw + ox
            cy = z.ymin + (r + 0.5) * ch + oy
            x0, y0 = cx - w / 2, cy - h / 2
            bid = f"b{len(buildings) + 1:07d}"
            buildings.append(BuildingFootprint(bid, Polygon.box(x0, y0, x0 + w, y0 + h)))
            truth[bid] = z.function_class
            count = base + (1 if rng.random() < extra_p else 0)
            for _ in range(count):
                px = x0 + w * (0.1 + 0.8 * rng.random())
                py = y0 + h * (0.1 + 0.8 * rng.random())
                if config.poi_jitter > 0:
                    px += config.poi_jitter * _gauss(rng)
                    py += config.poi_jitter * _gauss(rng)
                fc = z.function_class
                if rng.random() < config.poi_noise_rate:
                    wrong = [k for k in FunctionClass if k != fc]
                    fc = wrong[int(rng.random() * len(wrong))]
                pid = f"p{len(pois) + 1:08d}"
                pois.append(PoiRecord(pid, (px, py), RAW_CATEGORY[fc], fc))
    for n, spec in enumerate(config.high_level):
        cx, cy = config.zones[spec.zone].center
        fc = FunctionClass.parse(spec.function_class)
        pois.append(PoiRecord(f"h{n + 1:07d}", (cx + spec.offset[0], cy + spec.offset[1]),
                              RAW_CATEGORY[fc], fc, True, float(spec.radius)))
    provenance = {"generator": "synth", "seed": config.seed}
    scene = make_scene(buildings, pois, BlockConfig(config.block_grid_size), provenance)
    return scene, truth


def write_synth(scene: Scene, truth: GroundTruth, out_dir) -> dict:
    """Write the scene in ingest formats plus ``ground_truth.csv``."""
    paths = write_scene_files(scene, out_dir)
    gt = Path(out_dir) / "ground_truth.csv"
    with open(gt, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "code"])
        for b in scene.buildings:
            w.writerow([b.id, truth[b.id].label, int(truth[b.id])])
    paths["ground_truth"] = str(gt)
    return paths


def read_ground_truth(path) -> GroundTruth:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["id"]: FunctionClass(int(row["code"])) for row in csv.DictReader(fh)}


def random_labels(scene: Scene, seed: int) -> dict:
    """Uniform random class per building: the chance-level baseline."""
    rng = _rng(seed)
    return {b.id: FunctionClass(int(rng.random() * 5) + 1) for b in scene.buildings}


__all__ = ["Zone", "HighLevelSpec", "SynthConfig", "generate_scene", "write_synth",
           "read_ground_truth", "random_labels", "GroundTruth", "RAW_CATEGORY"]
