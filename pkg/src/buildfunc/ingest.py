"""Loading, cleaning and block assignment of footprints and POIs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateGeometry, EmptyScene, IoError, OverlappingBlocks
from .geometry import PackedPolygons, Polygon
from .model import (N_CLASSES, Block, BuildingFootprint, FunctionClass, PoiRecord,
                    id_sort_key)
from .taxonomy import DropReason, Dropped, TaxonomyMap

log = logging.getLogger(__name__)

Extent = tuple[float, float, float, float]


@dataclass(frozen=True)
class BlockConfig:
    """Block delineation: square grid cells, or user polygons with grid overflow."""

    grid_size: float = 500.0
    polygons: tuple[tuple[str, Polygon], ...] = ()

    def __post_init__(self):
        if not (math.isfinite(self.grid_size) and self.grid_size > 0):
            raise ConfigError(f"block grid_size must be > 0, got {self.grid_size}")

    @property
    def mode(self) -> str:
        return "polygons" if self.polygons else "grid"

    def to_dict(self) -> dict:
        return {"grid_size": self.grid_size,
                "polygons": [[bid, {"exterior": [list(p) for p in poly.exterior],
                                    "holes": [[list(p) for p in h] for h in poly.holes]}]
                             for bid, poly in self.polygons]}

    @classmethod
    def from_dict(cls, d) -> "BlockConfig":
        polys = tuple((bid, Polygon(tuple(map(tuple, g["exterior"])),
                                    tuple(tuple(map(tuple, h)) for h in g.get("holes", ()))))
                      for bid, g in d.get("polygons", ()))
        return cls(float(d.get("grid_size", 500.0)), polys)


@dataclass(frozen=True)
class IngestConfig:
    """Field names and block settings for :func:`load_scene`."""

    id_field: str = "id"
    block_field: str = "block_id"
    category_field: str = "category"
    high_level_field: str = "high_level"
    radius_field: str = "buffer_radius"
    x_field: str = "x"
    y_field: str = "y"
    blocks: BlockConfig = field(default_factory=BlockConfig)
    blocks_path: Optional[str] = None
    high_level_path: Optional[str] = None
    check_simple: bool = True


@dataclass
class IngestReport:
    buildings_read: int = 0
    buildings_kept: int = 0
    duplicates_dropped: int = 0
    duplicate_ids_dropped: int = 0
    invalid_geometry: int = 0
    pois_read: int = 0
    pois_kept: int = 0
    poi_invalid_geometry: int = 0
    poi_duplicate_ids_dropped: int = 0
    unmapped_category: int = 0
    excluded_category: int = 0
    invalid_high_level: int = 0
    errors: list = field(default_factory=list)

    MAX_ERRORS = 50

    def error(self, msg: str) -> None:
        if len(self.errors) < self.MAX_ERRORS:
            self.errors.append(msg)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Scene:
    """Validated, deduplicated buildings and POIs with block frequencies.

    Buildings and POIs are kept sorted by id, which makes positional order
    equal to id order for every tie-break downstream.
    """

    buildings: tuple[BuildingFootprint, ...]
    pois: tuple[PoiRecord, ...]
    blocks: tuple[Block, ...] = ()
    extent: Extent = (0.0, 0.0, 0.0, 0.0)
    provenance: dict = field(default_factory=dict, compare=False)
    block_config: BlockConfig = field(default_factory=BlockConfig)
    report: Optional[IngestReport] = field(default=None, compare=False)

    @property
    def has_block_frequencies(self) -> bool:
        return bool(self.blocks) and all(b.block_id is not None for b in self.buildings)

    @cached_property
    def packed(self) -> PackedPolygons:
        return PackedPolygons([b.polygon for b in self.buildings])

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.packed.centroids

    @cached_property
    def poi_xy(self) -> np.ndarray:
        return np.asarray([p.location for p in self.pois], dtype=float).reshape(-1, 2)

    @cached_property
    def poi_codes(self) -> np.ndarray:
        return np.asarray([int(p.function_class) for p in self.pois], dtype=np.int64)

    @cached_property
    def building_index(self) -> dict:
        return {b.id: i for i, b in enumerate(self.buildings)}

    @cached_property
    def building_freqs(self) -> np.ndarray:
        """``(n_buildings, 5)`` POI counts of the block each building belongs to."""
        by_id = {b.id: b.poi_counts for b in self.blocks}
        zero = (0,) * N_CLASSES
        return np.asarray([by_id.get(b.block_id, zero) for b in self.buildings],
                          dtype=np.int64).reshape(-1, N_CLASSES)

    @property
    def high_level_pois(self) -> list[PoiRecord]:
        return [p for p in self.pois if p.is_high_level]

    def without_pois(self) -> "Scene":
        return compute_block_frequencies(
            replace(self, pois=(), blocks=(),
                    buildings=tuple(replace(b, block_id=None) for b in self.buildings)))

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent),
            "block_config": self.block_config.to_dict(),
            "buildings": [b.to_dict() for b in self.buildings],
            "pois": [p.to_dict() for p in self.pois],
            "blocks": [b.to_dict() for b in self.blocks],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d) -> "Scene":
        return cls(tuple(BuildingFootprint.from_dict(b) for b in d["buildings"]),
                   tuple(PoiRecord.from_dict(p) for p in d["pois"]),
                   tuple(Block.from_dict(b) for b in d["blocks"]),
                   tuple(d["extent"]), dict(d.get("provenance", {})),
                   BlockConfig.from_dict(d.get("block_config", {})))

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("provenance")
        return sha256_json(d)


def sha256_json(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def compute_extent(buildings: Sequence[BuildingFootprint], pois: Sequence[PoiRecord],
                   extra: Sequence[Polygon] = ()) -> Extent:
    xs, ys = [], []
    for poly in [b.polygon for b in buildings] + list(extra):
        x0, y0, x1, y1 = poly.bounds
        xs += [x0, x1]
        ys += [y0, y1]
    for p in pois:
        xs.append(p.location[0])
        ys.append(p.location[1])
    if not xs:
        return (0.0, 0.0, 0.0, 0.0)
    return (min(xs), min(ys), max(xs), max(ys))


def make_scene(buildings, pois, block_config: BlockConfig = BlockConfig(),
               provenance: Optional[dict] = None, report=None) -> Scene:
    """Assemble a Scene from in-memory records (sorted, extent, blocks)."""
    buildings = tuple(sorted(buildings, key=lambda b: id_sort_key(b.id)))
    pois = tuple(sorted(pois, key=lambda p: id_sort_key(p.id)))
    if not buildings:
        raise EmptyScene("scene has no valid buildings")
    extent = compute_extent(buildings, pois, [poly for _, poly in block_config.polygons])
    scene = Scene(buildings, pois, (), extent, dict(provenance or {}), block_config, report)
    return compute_block_frequencies(scene)


# ---------------------------------------------------------------------------
# blocks


def _grid_shape(extent: Extent, size: float) -> tuple[int, int]:
    cols = max(1, math.ceil((extent[2] - extent[0]) / size))
    rows = max(1, math.ceil((extent[3] - extent[1]) / size))
    return rows, cols


def grid_cell(xy: np.ndarray, extent: Extent, size: float) -> tuple[np.ndarray, np.ndarray]:
    """Row/col of the grid cell holding each point; upper edges fold inward."""
    rows, cols = _grid_shape(extent, size)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    c = np.floor((xy[:, 0] - extent[0]) / size).astype(np.int64)
    r = np.floor((xy[:, 1] - extent[1]) / size).astype(np.int64)
    return np.clip(r, 0, rows - 1), np.clip(c, 0, cols - 1)


def _cell_id(prefix: str, r: int, c: int) -> str:
    return f"{prefix}_{r:05d}_{c:05d}"


def _cell_polygon(extent: Extent, size: float, r: int, c: int) -> Polygon:
    x0 = extent[0] + c * size
    y0 = extent[1] + r * size
    return Polygon.box(x0, y0, x0 + size, y0 + size)


def check_block_overlaps(polygons: Sequence[tuple[str, Polygon]], rel_tol: float = 1e-9):
    """Raise OverlappingBlocks when any two block interiors intersect."""
    import shapely
    from shapely.geometry import Polygon as ShapelyPolygon

    shapes = [ShapelyPolygon(p.exterior, p.holes) for _, p in polygons]
    if len(shapes) < 2:
        return
    tree = shapely.STRtree(shapes)
    left, right = tree.query(shapes, predicate="intersects")
    bad = []
    for i, j in zip(left.tolist(), right.tolist()):
        if i >= j:
            continue
        tol = rel_tol * min(shapes[i].area, shapes[j].area)
        if shapes[i].intersection(shapes[j]).area > tol:
            bad.append((polygons[i][0], polygons[j][0]))
    if bad:
        raise OverlappingBlocks(sorted(bad))


def _first_containing(packed: PackedPolygons, xy: np.ndarray) -> np.ndarray:
    """Index of the lowest-numbered polygon containing each point, else -1."""
    out = np.full(len(xy), -1, dtype=np.int64)
    if packed.n == 0 or len(xy) == 0:
        return out
    poly_idx, pt_idx = packed.candidate_pairs(xy, 0.0)
    _, inside = packed.pair_distance(xy, poly_idx, pt_idx)
    poly_idx, pt_idx = poly_idx[inside], pt_idx[inside]
    order = np.lexsort((poly_idx, pt_idx))
    poly_idx, pt_idx = poly_idx[order], pt_idx[order]
    first = np.ones(len(pt_idx), dtype=bool)
    first[1:] = pt_idx[1:] != pt_idx[:-1]
    out[pt_idx[first]] = poly_idx[first]
    return out


def compute_block_frequencies(scene: Scene) -> Scene:
    """Assign every POI and building to one block and count POIs per class.

    Grid mode materializes every cell over the scene extent. Polygon mode
    uses the configured block polygons; points outside all of them fall into
    an overflow block named after their grid cell.
    """
    cfg = scene.block_config
    extent, size = scene.extent, cfg.grid_size
    poi_xy = np.asarray([p.location for p in scene.pois], dtype=float).reshape(-1, 2)
    cent = np.asarray([b.centroid for b in scene.buildings], dtype=float).reshape(-1, 2)

    block_ids: list[str] = []
    block_polys: list[Polygon] = []

    def assign(xy):
        if cfg.mode == "grid":
            r, c = grid_cell(xy, extent, size)
            return [_cell_id("cell", a, b) for a, b in zip(r.tolist(), c.tolist())]
        hit = _first_containing(packed_blocks, xy)
        r, c = grid_cell(xy, extent, size)
        return [block_ids[h] if h >= 0 else _cell_id("overflow", a, b)
                for h, a, b in zip(hit.tolist(), r.tolist(), c.tolist())]

    if cfg.mode == "grid":
        rows, cols = _grid_shape(extent, size)
        for r in range(rows):
            for c in range(cols):
                block_ids.append(_cell_id("cell", r, c))
                block_polys.append(_cell_polygon(extent, size, r, c))
    else:
        check_block_overlaps(cfg.polygons)
        for bid, poly in cfg.polygons:
            block_ids.append(bid)
            block_polys.append(poly)
        packed_blocks = PackedPolygons(block_polys)

    poi_blocks = assign(poi_xy)
    building_blocks = assign(cent)
    known = set(block_ids)
    if cfg.mode == "polygons":
        overflow = sorted({b for b in poi_blocks + building_blocks if b not in known})
        for bid in overflow:
            _, r, c = bid.split("_")
            block_ids.append(bid)
            block_polys.append(_cell_polygon(extent, size, int(r), int(c)))
        known.update(overflow)

    counts = {bid: [0] * N_CLASSES for bid in block_ids}
    for poi, bid in zip(scene.pois, poi_blocks):
        counts[bid][int(poi.function_class) - 1] += 1
    blocks = tuple(Block(bid, poly, tuple(counts[bid]), sum(counts[bid]))
                   for bid, poly in zip(block_ids, block_polys))
    pois = tuple(replace(p, block_id=bid) for p, bid in zip(scene.pois, poi_blocks))
    buildings = tuple(
        replace(b, block_id=b.block_id if b.block_id in known else bid)
        for b, bid in zip(scene.buildings, building_blocks))
    return replace(scene, buildings=buildings, pois=pois, blocks=blocks)


# ---------------------------------------------------------------------------
# file formats


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise IoError(f"{path} is not valid JSON: {exc}") from None


def _features(doc, path) -> list:
    if doc.get("type") == "FeatureCollection":
        return list(doc.get("features") or [])
    if doc.get("type") == "Feature":
        return [doc]
    raise IoError(f"{path}: expected a GeoJSON FeatureCollection")


def _feature_id(feat, props, field_name):
    fid = props.get(field_name, feat.get("id"))
    return None if fid is None else str(fid)


def _polygon_from_geojson(geom) -> Polygon:
    if not geom:
        raise DegenerateGeometry("missing geometry")
    kind, coords = geom.get("type"), geom.get("coordinates")
    if kind == "MultiPolygon":
        if len(coords) != 1:
            raise DegenerateGeometry(f"multipart footprint with {len(coords)} parts")
        kind, coords = "Polygon", coords[0]
    if kind != "Polygon" or not coords:
        raise DegenerateGeometry(f"expected Polygon geometry, got {kind}")
    return Polygon(tuple(tuple(p[:2]) for p in coords[0]),
                   tuple(tuple(tuple(p[:2]) for p in h) for h in coords[1:]))


def _truthy(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "y", "t")
    return bool(value)


def read_footprints(path, cfg: IngestConfig, report: IngestReport) -> list[BuildingFootprint]:
    feats = _features(_read_json(path), path)
    kept, seen_geom, seen_ids = [], set(), set()
    for n, feat in enumerate(feats):
        report.buildings_read += 1
        props = feat.get("properties") or {}
        fid = _feature_id(feat, props, cfg.id_field)
        try:
            if fid is None:
                raise DegenerateGeometry("missing id")
            poly = _polygon_from_geojson(feat.get("geometry"))
            if cfg.check_simple and not poly.is_simple():
                raise DegenerateGeometry("self-intersecting ring")
        except (DegenerateGeometry, TypeError, ValueError, IndexError) as exc:
            report.invalid_geometry += 1
            report.error(f"footprint #{n} ({fid}): {exc}")
            continue
        key = poly.canonical()
        if key in seen_geom:
            report.duplicates_dropped += 1
            continue
        if fid in seen_ids:
            report.duplicate_ids_dropped += 1
            report.error(f"footprint #{n}: duplicate id {fid}")
            continue
        seen_geom.add(key)
        seen_ids.add(fid)
        block = props.get(cfg.block_field)
        kept.append(BuildingFootprint(fid, poly, None if block is None else str(block)))
    return kept


def _poi_rows(path, cfg: IngestConfig):
    """Yield (id, x, y, props) from GeoJSON points or a CSV with x/y columns."""
    p = Path(path)
    if p.suffix.lower() in (".csv", ".tsv", ".txt"):
        try:
            with open(p, newline="", encoding="utf-8") as fh:
                delim = "\t" if p.suffix.lower() == ".tsv" else ","
                for row in csv.DictReader(fh, delimiter=delim):
                    yield row.get(cfg.id_field), row.get(cfg.x_field), row.get(cfg.y_field), row
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from None
        return
    for feat in _features(_read_json(path), path):
        props = feat.get("properties") or {}
        geom = feat.get("geometry") or {}
        xy = geom.get("coordinates") if geom.get("type") == "Point" else None
        x, y = (xy[0], xy[1]) if xy and len(xy) >= 2 else (None, None)
        yield _feature_id(feat, props, cfg.id_field), x, y, props


def _read_high_level(path) -> dict:
    out = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out[str(row["id"])] = float(row["buffer_radius"])
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise IoError(f"{path}: needs id,buffer_radius columns ({exc})") from None
    return out


def read_pois(path, taxonomy: TaxonomyMap, cfg: IngestConfig,
              report: IngestReport) -> list[PoiRecord]:
    high = _read_high_level(cfg.high_level_path) if cfg.high_level_path else {}
    kept, seen = [], set()
    for n, (pid, x, y, props) in enumerate(_poi_rows(path, cfg)):
        report.pois_read += 1
        try:
            if pid is None:
                raise ValueError("missing id")
            x, y = float(x), float(y)
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError("non-finite coordinate")
        except (TypeError, ValueError) as exc:
            report.poi_invalid_geometry += 1
            report.error(f"poi #{n} ({pid}): {exc}")
            continue
        raw = str(props.get(cfg.category_field) or "")
        mapped = taxonomy.lookup(raw)
        if isinstance(mapped, Dropped):
            if mapped.reason is DropReason.EXCLUDED:
                report.excluded_category += 1
            else:
                report.unmapped_category += 1
            continue
        if pid in seen:
            report.poi_duplicate_ids_dropped += 1
            report.error(f"poi #{n}: duplicate id {pid}")
            continue
        is_high = _truthy(props.get(cfg.high_level_field, False)) or pid in high
        radius = high.get(pid, props.get(cfg.radius_field))
        radius = None if radius in (None, "") else float(radius)
        if is_high and (radius is None or not math.isfinite(radius) or radius <= 0):
            report.invalid_high_level += 1
            report.error(f"poi #{n} ({pid}): high-level POI without positive buffer_radius")
            continue
        seen.add(pid)
        kept.append(PoiRecord(pid, (x, y), raw, mapped, is_high, radius if is_high else None))
    return kept


def read_block_polygons(path, cfg: IngestConfig) -> tuple[tuple[str, Polygon], ...]:
    out = []
    for n, feat in enumerate(_features(_read_json(path), path)):
        props = feat.get("properties") or {}
        bid = _feature_id(feat, props, cfg.id_field) or f"block_{n}"
        out.append((bid, _polygon_from_geojson(feat.get("geometry"))))
    return tuple(out)


def load_scene(footprints_path, pois_path, taxonomy: TaxonomyMap,
               config: IngestConfig = IngestConfig()) -> Scene:
    """Read, validate, deduplicate and block-assign a scene.

    Malformed records are dropped and counted in ``scene.report``; only an
    unreadable file or a scene without buildings is fatal.
    """
    report = IngestReport()
    buildings = read_footprints(footprints_path, config, report)
    pois = read_pois(pois_path, taxonomy, config, report)
    block_cfg = config.blocks
    if config.blocks_path:
        block_cfg = replace(block_cfg, polygons=read_block_polygons(config.blocks_path, config))
    report.buildings_kept = len(buildings)
    report.pois_kept = len(pois)
    provenance = {
        "footprints_sha256": file_digest(footprints_path),
        "pois_sha256": file_digest(pois_path),
        "taxonomy_sha256": hashlib.sha256(taxonomy.to_text().encode()).hexdigest(),
        "block_mode": block_cfg.mode,
        "block_grid_size": block_cfg.grid_size,
    }
    if config.blocks_path:
        provenance["blocks_sha256"] = file_digest(config.blocks_path)
    if config.high_level_path:
        provenance["high_level_sha256"] = file_digest(config.high_level_path)
    log.info("ingest: %d/%d buildings, %d/%d POIs kept", len(buildings),
             report.buildings_read, len(pois), report.pois_read)
    return make_scene(buildings, pois, block_cfg, provenance, report)


def validate_scene(scene: Scene) -> list[str]:
    """Return a list of invariant violations (empty when the scene is valid)."""
    problems = []
    x0, y0, x1, y1 = scene.extent
    ids = [b.id for b in scene.buildings]
    if len(ids) != len(set(ids)):
        problems.append("duplicate building ids")
    if len({p.id for p in scene.pois}) != len(scene.pois):
        problems.append("duplicate POI ids")
    keys = [b.polygon.canonical() for b in scene.buildings]
    if len(keys) != len(set(keys)):
        problems.append("duplicate building geometry")
    for b in scene.buildings:
        bx0, by0, bx1, by1 = b.polygon.bounds
        if bx0 < x0 or by0 < y0 or bx1 > x1 or by1 > y1:
            problems.append(f"building {b.id} outside extent")
        cx, cy = b.centroid
        if not (bx0 <= cx <= bx1 and by0 <= cy <= by1):
            problems.append(f"building {b.id} centroid outside its bbox")
        if not b.polygon.is_simple():
            problems.append(f"building {b.id} not simple")
    for p in scene.pois:
        px, py = p.location
        if not (x0 <= px <= x1 and y0 <= py <= y1):
            problems.append(f"poi {p.id} outside extent")
    if scene.blocks:
        total = sum(b.total_pois for b in scene.blocks)
        if total != len(scene.pois):
            problems.append(f"block totals {total} != {len(scene.pois)} POIs")
        by_id = {b.id: b for b in scene.blocks}
        from .geometry import contains
        for p in scene.pois:
            blk = by_id.get(p.block_id)
            if blk is None or not contains(blk.polygon, p.location):
                problems.append(f"poi {p.id} not inside its block {p.block_id}")
    return problems


# ---------------------------------------------------------------------------
# writers


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")


def footprints_geojson(buildings: Sequence[BuildingFootprint], extra=None) -> dict:
    feats = []
    for b in buildings:
        props = {"id": b.id}
        if b.block_id is not None:
            props["block_id"] = b.block_id
        if extra:
            props.update(extra.get(b.id, {}))
        rings = [[list(p) for p in r] + [list(r[0])] for r in b.polygon.rings]
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "Polygon", "coordinates": rings}})
    return {"type": "FeatureCollection", "features": feats}


def pois_geojson(pois: Sequence[PoiRecord]) -> dict:
    feats = []
    for p in pois:
        props = {"id": p.id, "category": p.raw_category}
        if p.is_high_level:
            props["high_level"] = True
            props["buffer_radius"] = p.buffer_radius
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "Point", "coordinates": list(p.location)}})
    return {"type": "FeatureCollection", "features": feats}


def write_scene_files(scene: Scene, out_dir) -> dict:
    """Write footprints/POIs GeoJSON plus the full ``scene.json``."""
    out = Path(out_dir)
    paths = {"footprints": out / "buildings.geojson", "pois": out / "pois.geojson",
             "scene": out / "scene.json"}
    _dump(footprints_geojson(scene.buildings), paths["footprints"])
    _dump(pois_geojson(scene.pois), paths["pois"])
    _dump(scene.to_dict(), paths["scene"])
    return {k: str(v) for k, v in paths.items()}


def read_scene_json(path) -> Scene:
    return Scene.from_dict(_read_json(path))
