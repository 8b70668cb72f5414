"""Shared domain types: function classes, footprints, POIs, blocks, labels.

Every type here is an immutable value object and round-trips through
``to_dict`` / ``from_dict`` (plain JSON-compatible dictionaries).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .errors import InvalidHighLevelPoi
from .geometry import Point, Polygon


class FunctionClass(enum.IntEnum):
    """The five building functions, encoded 1..5 in table order.

    The encoding doubles as the tie-break order: when scores or votes tie,
    the lowest code wins.
    """

    RESIDENTIAL = 1
    COMMERCIAL = 2
    PUBLIC_SERVICES = 3
    TECHNOLOGY_INDUSTRY = 4
    EDUCATIONAL_CULTURAL = 5

    @property
    def label(self) -> str:
        return _CLASS_NAMES[self]

    @classmethod
    def parse(cls, value) -> "FunctionClass":
        """Accept an int code, enum name, or display name (case-insensitive)."""
        if isinstance(value, FunctionClass):
            return value
        if isinstance(value, (int,)) and not isinstance(value, bool):
            return cls(value)
        text = str(value).strip()
        if text.isdigit():
            return cls(int(text))
        key = _norm_name(text)
        if key in _BY_NAME:
            return _BY_NAME[key]
        raise ValueError(f"unknown function class {value!r}")


_CLASS_NAMES = {
    FunctionClass.RESIDENTIAL: "Residential",
    FunctionClass.COMMERCIAL: "Commercial",
    FunctionClass.PUBLIC_SERVICES: "PublicServices",
    FunctionClass.TECHNOLOGY_INDUSTRY: "TechnologyIndustry",
    FunctionClass.EDUCATIONAL_CULTURAL: "EducationalCultural",
}


def _norm_name(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


_BY_NAME = {}
for _fc, _name in _CLASS_NAMES.items():
    _BY_NAME[_norm_name(_name)] = _fc
    _BY_NAME[_norm_name(_fc.name)] = _fc
_BY_NAME.update({
    "commercialservices": FunctionClass.COMMERCIAL,
    "technologyandindustry": FunctionClass.TECHNOLOGY_INDUSTRY,
    "educationalandcultural": FunctionClass.EDUCATIONAL_CULTURAL,
})

N_CLASSES = 5
CLASSES = tuple(FunctionClass)


def label_name(code: Optional[int]) -> str:
    """Display name for a class code; 0 or None is ``Unlabeled``."""
    if not code:
        return "Unlabeled"
    return FunctionClass(int(code)).label


def parse_label(value) -> Optional[FunctionClass]:
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in ("", "unlabeled", "none", "0"):
        return None
    if value == 0:
        return None
    return FunctionClass.parse(value)


class Stage(enum.IntEnum):
    """Which pipeline stage last set a label. Order is the pipeline order."""

    CANDIDATE = 1
    REFINED = 2
    CORRECTED = 3
    EXTERNAL = 4


@dataclass(frozen=True)
class ClassScores:
    """Non-negative 5-vector indexed by :class:`FunctionClass`."""

    values: tuple[float, ...]
    normalized: bool = False

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != N_CLASSES:
            raise ValueError(f"ClassScores needs {N_CLASSES} values, got {len(vals)}")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"ClassScores entries must be finite and >= 0: {vals}")
        if self.normalized and abs(math.fsum(vals) - 1.0) > 1e-9:
            raise ValueError(f"normalized ClassScores must sum to 1, got {math.fsum(vals)}")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, cls: FunctionClass) -> float:
        return self.values[int(cls) - 1]

    def argmax(self) -> FunctionClass:
        best = max(self.values)
        return FunctionClass(self.values.index(best) + 1)

    def total(self) -> float:
        return math.fsum(self.values)

    def to_dict(self) -> dict:
        return {"values": list(self.values), "normalized": self.normalized}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassScores":
        return cls(tuple(d["values"]), bool(d.get("normalized", False)))


def _polygon_to_dict(poly: Polygon) -> dict:
    return {"exterior": [list(p) for p in poly.exterior],
            "holes": [[list(p) for p in h] for h in poly.holes]}


def _polygon_from_dict(d: Mapping) -> Polygon:
    return Polygon(tuple(tuple(p) for p in d["exterior"]),
                   tuple(tuple(tuple(p) for p in h) for h in d.get("holes", ())))


@dataclass(frozen=True)
class BuildingFootprint:
    id: str
    polygon: Polygon
    block_id: Optional[str] = None

    @property
    def centroid(self) -> Point:
        return self.polygon.centroid

    def to_dict(self) -> dict:
        return {"id": self.id, "polygon": _polygon_to_dict(self.polygon),
                "block_id": self.block_id}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BuildingFootprint":
        return cls(str(d["id"]), _polygon_from_dict(d["polygon"]), d.get("block_id"))


@dataclass(frozen=True)
class PoiRecord:
    id: str
    location: Point
    raw_category: str
    function_class: FunctionClass
    is_high_level: bool = False
    buffer_radius: Optional[float] = None
    block_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))
        object.__setattr__(self, "function_class", FunctionClass.parse(self.function_class))
        if self.is_high_level:
            check_high_level(self)

    def to_dict(self) -> dict:
        return {"id": self.id, "location": list(self.location),
                "raw_category": self.raw_category,
                "function_class": int(self.function_class),
                "is_high_level": self.is_high_level,
                "buffer_radius": self.buffer_radius, "block_id": self.block_id}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PoiRecord":
        return cls(str(d["id"]), tuple(d["location"]), d["raw_category"],
                   FunctionClass(d["function_class"]), bool(d.get("is_high_level", False)),
                   d.get("buffer_radius"), d.get("block_id"))


def check_high_level(poi: PoiRecord) -> None:
    r = poi.buffer_radius
    if r is None or not math.isfinite(float(r)) or float(r) <= 0:
        raise InvalidHighLevelPoi(f"high-level POI {poi.id} needs buffer_radius > 0, got {r}")


@dataclass(frozen=True)
class Block:
    """Local spatial unit carrying per-class POI counts."""

    id: str
    polygon: Polygon
    poi_counts: tuple[int, ...] = (0,) * N_CLASSES
    total_pois: int = 0

    def __post_init__(self):
        counts = tuple(int(c) for c in self.poi_counts)
        if len(counts) != N_CLASSES or any(c < 0 for c in counts):
            raise ValueError(f"bad poi_counts {counts}")
        if self.total_pois != sum(counts):
            raise ValueError(f"total_pois {self.total_pois} != sum of counts {sum(counts)}")
        object.__setattr__(self, "poi_counts", counts)

    def freq(self, cls: FunctionClass) -> int:
        return self.poi_counts[int(cls) - 1]

    def to_dict(self) -> dict:
        return {"id": self.id, "polygon": _polygon_to_dict(self.polygon),
                "poi_counts": list(self.poi_counts), "total_pois": self.total_pois}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Block":
        return cls(d["id"], _polygon_from_dict(d["polygon"]), tuple(d["poi_counts"]),
                   int(d["total_pois"]))


@dataclass(frozen=True)
class LabelState:
    """A building's label (``None`` = Unlabeled) and the stage that set it."""

    building_id: str
    label: Optional[FunctionClass]
    stage: Stage
    score_vector: Optional[ClassScores] = None

    def __post_init__(self):
        if self.label is None and self.score_vector is not None and self.score_vector.total() > 0:
            raise ValueError(f"{self.building_id}: Unlabeled with non-zero scores")

    def to_dict(self) -> dict:
        return {"building_id": self.building_id,
                "label": None if self.label is None else int(self.label),
                "stage": self.stage.name,
                "score_vector": None if self.score_vector is None else self.score_vector.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabelState":
        sv = d.get("score_vector")
        return cls(d["building_id"], parse_label(d.get("label")), Stage[d["stage"]],
                   None if sv is None else ClassScores.from_dict(sv))


def unique_ids(items: Sequence) -> bool:
    ids = [it.id for it in items]
    return len(ids) == len(set(ids))


def id_sort_key(value: str):
    """Natural order for ids: numeric ids sort numerically, before text ids."""
    s = str(value)
    try:
        return (0, int(s), "")
    except ValueError:
        return (1, 0, s)


__all__ = [
    "FunctionClass", "CLASSES", "N_CLASSES", "Stage", "ClassScores",
    "BuildingFootprint", "PoiRecord", "Block", "LabelState", "label_name",
    "parse_label", "id_sort_key", "check_high_level",
]
