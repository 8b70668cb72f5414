import pytest

from buildfunc.geometry import Polygon
from buildfunc.ingest import BlockConfig, make_scene
from buildfunc.model import BuildingFootprint, FunctionClass, PoiRecord

R, C, P, T, E = (FunctionClass.RESIDENTIAL, FunctionClass.COMMERCIAL,
                 FunctionClass.PUBLIC_SERVICES, FunctionClass.TECHNOLOGY_INDUSTRY,
                 FunctionClass.EDUCATIONAL_CULTURAL)


def box_building(bid, x0, y0, size=10.0):
    return BuildingFootprint(bid, Polygon.box(x0, y0, x0 + size, y0 + size))


def poi(pid, x, y, fc, high=False, radius=None):
    return PoiRecord(pid, (float(x), float(y)), fc.label, fc, high, radius)


def scene_of(buildings, pois=(), grid=500.0):
    return make_scene(list(buildings), list(pois), BlockConfig(grid))


def row_scene(codes, spacing=20.0):
    """Buildings on a line, one in-footprint POI per labeled entry (None = no POI)."""
    buildings, pois = [], []
    for i, fc in enumerate(codes):
        bid = f"b{i:03d}"
        buildings.append(box_building(bid, i * spacing, 0.0))
        if fc is not None:
            pois.append(poi(f"p{i:03d}", i * spacing + 5, 5, fc))
    return scene_of(buildings, pois)


@pytest.fixture
def unit_square():
    return Polygon([(1, 1), (2, 1), (2, 2), (1, 2)])


def _feature(props, geom):
    return {"type": "Feature", "properties": props, "geometry": geom}


def write_fixture(directory):
    """Small input pair with known contents.

    Footprints: 10 distinct squares, one byte-identical copy, one copy with
    reversed orientation and rotated start vertex, one self-intersecting
    bowtie. POIs: 25 rows; 3 excluded categories, 1 unknown category and
    1 with missing coordinates, leaving 20.
    """
    import json
    from pathlib import Path

    directory = Path(directory)
    feats = []
    for i in range(10):
        x0, y0 = 30.0 * (i % 5), 30.0 * (i // 5)
        ring = [[x0, y0], [x0 + 10, y0], [x0 + 10, y0 + 10], [x0, y0 + 10], [x0, y0]]
        feats.append(_feature({"id": f"b{i:02d}"}, {"type": "Polygon", "coordinates": [ring]}))
    feats.append(json.loads(json.dumps(feats[3])))
    feats[-1]["properties"]["id"] = "dup_a"
    ring = [[40.0, 10.0], [30.0, 10.0], [30.0, 0.0], [40.0, 0.0], [40.0, 10.0]]
    feats.append(_feature({"id": "dup_b"}, {"type": "Polygon", "coordinates": [ring]}))
    bowtie = [[0, 100], [10, 110], [10, 100], [0, 110], [0, 100]]
    feats.append(_feature({"id": "bad"}, {"type": "Polygon", "coordinates": [bowtie]}))
    fp = directory / "footprints.geojson"
    fp.write_text(json.dumps({"type": "FeatureCollection", "features": feats}))

    cats = ["Real Estate", "Shopping", "Healthcare", "Companies and Enterprises",
            "Education and Training Venue"]
    pts = []
    for j in range(20):
        b = j % 10
        x0, y0 = 30.0 * (b % 5), 30.0 * (b // 5)
        pts.append(_feature({"id": f"p{j:02d}", "category": cats[j % 5]},
                            {"type": "Point", "coordinates": [x0 + 2 + (j // 10) * 5, y0 + 5]}))
    for j, cat in enumerate(["Roads", "roads", "Natural Features", "Spaceport"]):
        pts.append(_feature({"id": f"q{j}", "category": cat},
                            {"type": "Point", "coordinates": [5.0, 5.0]}))
    pts.append(_feature({"id": "q9", "category": "Shopping"}, None))
    pp = directory / "pois.geojson"
    pp.write_text(json.dumps({"type": "FeatureCollection", "features": pts}))
    return fp, pp


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
