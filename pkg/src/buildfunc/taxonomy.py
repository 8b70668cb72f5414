"""Mapping from raw POI categories to building functions."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Union

from .errors import ConfigError, IoError
from .model import CLASSES, FunctionClass

EXCLUDE = "EXCLUDE"
SECONDARY_SEP = ";"


class DropReason(enum.Enum):
    EXCLUDED = "excluded"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Dropped:
    reason: DropReason


def normalize_category(raw: str) -> str:
    text = " ".join(str(raw).split()).lower()
    if SECONDARY_SEP in text:
        primary, _, secondary = text.partition(SECONDARY_SEP)
        text = f"{primary.strip()}{SECONDARY_SEP}{secondary.strip()}"
    return text


@dataclass(frozen=True)
class TaxonomyMap:
    """Case- and whitespace-insensitive category lookup.

    Keys may carry a secondary qualifier (``"life services;post office"``);
    a qualified key takes precedence over its bare primary category.
    """

    entries: Mapping[str, FunctionClass] = field(default_factory=dict)
    excluded: frozenset = frozenset()

    def __post_init__(self):
        entries = {normalize_category(k): FunctionClass.parse(v) for k, v in self.entries.items()}
        excluded = frozenset(normalize_category(k) for k in self.excluded)
        both = excluded & set(entries)
        if both:
            raise ConfigError(f"categories both mapped and excluded: {sorted(both)}")
        object.__setattr__(self, "entries", dict(sorted(entries.items())))
        object.__setattr__(self, "excluded", excluded)

    def lookup(self, raw: str) -> Union[FunctionClass, Dropped]:
        key = normalize_category(raw)
        keys = [key]
        if SECONDARY_SEP in key:
            keys.append(key.partition(SECONDARY_SEP)[0])
        for k in keys:
            if k in self.excluded:
                return Dropped(DropReason.EXCLUDED)
            if k in self.entries:
                return self.entries[k]
        return Dropped(DropReason.UNKNOWN)

    def targets(self) -> set:
        return set(self.entries.values())

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["raw_category", "target_class"])
        for k, v in self.entries.items():
            w.writerow([k, v.label])
        for k in sorted(self.excluded):
            w.writerow([k, EXCLUDE])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TaxonomyMap":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        entries, excluded = {}, set()
        for row in csv.DictReader(lines):
            try:
                raw, target = row["raw_category"], row["target_class"]
            except KeyError as exc:
                raise ConfigError(f"taxonomy file needs raw_category,target_class columns: {exc}")
            if raw is None or target is None:
                raise ConfigError(f"malformed taxonomy row: {row}")
            if target.strip().upper() == EXCLUDE:
                excluded.add(raw)
                continue
            try:
                entries[raw] = FunctionClass.parse(target)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return cls(entries, frozenset(excluded))

    @classmethod
    def load(cls, path) -> "TaxonomyMap":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read taxonomy {path}: {exc}") from None
        return cls.from_text(text)

    @classmethod
    def default(cls) -> "TaxonomyMap":
        text = resources.files("buildfunc").joinpath("data/taxonomy_default.csv").read_text("utf-8")
        tax = cls.from_text(text)
        missing = set(CLASSES) - tax.targets()
        assert not missing, f"default taxonomy misses {missing}"
        return tax


def map_category(raw: str, taxonomy: TaxonomyMap) -> Union[FunctionClass, Dropped]:
    """Total lookup: a FunctionClass, or Dropped(EXCLUDED | UNKNOWN)."""
    return taxonomy.lookup(raw)
