"""BFMI: agreement between building labels and POI density surfaces.

POIs of each class are smoothed with a Gaussian KDE onto a common grid,
turned into per-cell class shares, averaged over each footprint, and
compared with the building's label by Top-1 agreement and cosine
similarity. BFMI is the ``w``-weighted mean of the two.

The POIs used here are usually the same ones that produced the labels, so
BFMI measures consistency with the evidence, not accuracy against an
independent reference. Reports say so in their ``notes``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import GridMismatch, InvalidParams, IoError, OutOfExtent, SkippedBuilding
from .geometry import Polygon, contains_many
from .ingest import Scene
from .labeling import Labeling
from .model import (CLASSES, N_CLASSES, BuildingFootprint, ClassScores, FunctionClass,
                    label_name)

_ROW_CHUNK = 128
_POINT_CHUNK = 4096

NOTES = (
    "BFMI uses the same POIs that fed the labeling; it measures consistency "
    "with POI evidence, not accuracy against surveyed ground truth.",
    "Top-1 compares each label with the argmax of the footprint's POI "
    "probability vector (ties to the lowest class code).",
)


@dataclass(frozen=True)
class KdeParams:
    """Gaussian KDE settings (meters). ``padding`` defaults to 4 bandwidths."""

    bandwidth: float = 200.0
    cell_size: float = 20.0
    epsilon: float = 1e-9
    padding: Optional[float] = None

    def __post_init__(self):
        for name in ("bandwidth", "cell_size", "epsilon"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidParams(f"{name} must be finite and > 0, got {v}")
        if self.padding is not None and not (math.isfinite(self.padding) and self.padding >= 0):
            raise InvalidParams(f"padding must be >= 0, got {self.padding}")

    @property
    def pad(self) -> float:
        return 4.0 * self.bandwidth if self.padding is None else self.padding


@dataclass(frozen=True)
class GridSpec:
    """Regular grid; row 0 is the southernmost row, col 0 the westernmost."""

    origin_x: float
    origin_y: float
    cell_size: float
    rows: int
    cols: int

    @classmethod
    def from_extent(cls, extent, cell_size: float, pad: float = 0.0) -> "GridSpec":
        x0, y0, x1, y1 = extent
        if not (x1 >= x0 and y1 >= y0):
            raise InvalidParams(f"bad extent {extent}")
        x0, y0, x1, y1 = x0 - pad, y0 - pad, x1 + pad, y1 + pad
        cols = max(1, math.ceil((x1 - x0) / cell_size))
        rows = max(1, math.ceil((y1 - y0) / cell_size))
        return cls(float(x0), float(y0), float(cell_size), rows, cols)

    @property
    def x_centers(self) -> np.ndarray:
        return self.origin_x + (np.arange(self.cols) + 0.5) * self.cell_size

    @property
    def y_centers(self) -> np.ndarray:
        return self.origin_y + (np.arange(self.rows) + 0.5) * self.cell_size

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.origin_x, self.origin_y, self.origin_x + self.cols * self.cell_size,
                self.origin_y + self.rows * self.cell_size)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        c = int(math.floor((x - self.origin_x) / self.cell_size))
        r = int(math.floor((y - self.origin_y) / self.cell_size))
        return min(max(r, 0), self.rows - 1), min(max(c, 0), self.cols - 1)


@dataclass(frozen=True)
class ClassRaster:
    grid: np.ndarray
    spec: GridSpec
    function_class: FunctionClass
    kind: str = "density"

    def __post_init__(self):
        if self.grid.shape != (self.spec.rows, self.spec.cols):
            raise GridMismatch(f"grid shape {self.grid.shape} does not match {self.spec}")
        if self.kind not in ("density", "probability"):
            raise ValueError(f"unknown raster kind {self.kind}")


def kde_density(points, params: KdeParams, extent: Union[GridSpec, Sequence[float]],
                function_class: FunctionClass = FunctionClass.RESIDENTIAL,
                threads: int = 1) -> ClassRaster:
    """Gaussian KDE evaluated at cell centers.

    ``D(x) = sum_j exp(-|x - x_j|^2 / (2 h^2)) / (2 pi h^2)``, computed
    exactly (no truncation) through the separable x/y factors of the kernel.
    ``extent`` is either a GridSpec or ``(xmin, ymin, xmax, ymax)``, padded
    by ``params.pad``.
    """
    spec = extent if isinstance(extent, GridSpec) else GridSpec.from_extent(
        extent, params.cell_size, params.pad)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    grid = np.zeros((spec.rows, spec.cols))
    if len(pts) == 0:
        return ClassRaster(grid, spec, function_class)
    h2 = 2.0 * params.bandwidth ** 2
    xc, yc = spec.x_centers, spec.y_centers
    norm = 1.0 / (math.pi * h2)

    def rows_block(r0):
        r1 = min(r0 + _ROW_CHUNK, spec.rows)
        out = np.zeros((r1 - r0, spec.cols))
        for p0 in range(0, len(pts), _POINT_CHUNK):
            chunk = pts[p0:p0 + _POINT_CHUNK]
            gx = np.exp(-((xc[None, :] - chunk[:, 0:1]) ** 2) / h2)
            gy = np.exp(-((yc[None, r0:r1] - chunk[:, 1:2]) ** 2) / h2)
            out += gy.T @ gx
        return r0, out

    starts = list(range(0, spec.rows, _ROW_CHUNK))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            blocks = list(ex.map(rows_block, starts))
    else:
        blocks = [rows_block(s) for s in starts]
    for r0, block in blocks:
        grid[r0:r0 + len(block)] = block
    return ClassRaster(grid * norm, spec, function_class)


def normalize_probability(densities: Sequence[ClassRaster],
                          epsilon: float = 1e-9) -> list[ClassRaster]:
    """Per-cell class shares ``D_c / (sum_k D_k + eps)``, then rescaled so each
    cell with any density sums to 1; cells with none become uniform (0.2)."""
    if len(densities) != N_CLASSES:
        raise GridMismatch(f"need {N_CLASSES} class rasters, got {len(densities)}")
    spec = densities[0].spec
    for d in densities[1:]:
        if d.spec != spec:
            raise GridMismatch(f"raster grids differ: {d.spec} vs {spec}")
    stack = np.stack([d.grid for d in densities])
    total = stack.sum(axis=0)
    prob = stack / (total + epsilon)
    s = prob.sum(axis=0)
    prob = np.where(s > 0, prob / np.where(s > 0, s, 1.0), 1.0 / N_CLASSES)
    return [ClassRaster(prob[i], spec, d.function_class, "probability")
            for i, d in enumerate(densities)]


def _stack(probability) -> tuple[np.ndarray, GridSpec]:
    if isinstance(probability, tuple) and len(probability) == 2 and isinstance(
            probability[1], GridSpec):
        return probability
    spec = probability[0].spec
    return np.stack([r.grid for r in probability]), spec


def zonal_mean(probability, building: Union[BuildingFootprint, Polygon]) -> ClassScores:
    """Mean class probability over cells whose centers fall in the footprint.

    Falls back to the cell holding the centroid when no center is inside.
    ``probability`` is a list of 5 ClassRasters or a ``(stack, GridSpec)``.
    """
    stack, spec = _stack(probability)
    poly = building.polygon if isinstance(building, BuildingFootprint) else building
    bx0, by0, bx1, by1 = poly.bounds
    gx0, gy0, gx1, gy1 = spec.bounds
    if bx0 < gx0 or by0 < gy0 or bx1 > gx1 or by1 > gy1:
        raise OutOfExtent(f"footprint bounds {poly.bounds} outside raster {spec.bounds}")
    cs = spec.cell_size
    c0 = max(0, math.floor((bx0 - spec.origin_x) / cs - 0.5))
    c1 = min(spec.cols - 1, math.ceil((bx1 - spec.origin_x) / cs - 0.5))
    r0 = max(0, math.floor((by0 - spec.origin_y) / cs - 0.5))
    r1 = min(spec.rows - 1, math.ceil((by1 - spec.origin_y) / cs - 0.5))
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    cc, rr = np.meshgrid(cols, rows)
    cc, rr = cc.ravel(), rr.ravel()
    centers = np.column_stack([spec.origin_x + (cc + 0.5) * cs, spec.origin_y + (rr + 0.5) * cs])
    inside = contains_many(poly, centers) if len(centers) else np.zeros(0, dtype=bool)
    if inside.any():
        vec = stack[:, rr[inside], cc[inside]].mean(axis=1)
    else:
        r, c = spec.cell_of(*poly.centroid)
        vec = stack[:, r, c]
    vec = vec / vec.sum()
    return ClassScores(tuple(vec), normalized=True)


@dataclass(frozen=True)
class BuildingEval:
    building_id: str
    poi_probability: ClassScores
    label_onehot: ClassScores
    top1: int
    cosine: float
    fused: float

    @property
    def label(self) -> FunctionClass:
        return self.label_onehot.argmax()


def score_building(poi_prob: ClassScores, label: Optional[FunctionClass], w: float = 0.5,
                   building_id: str = "") -> BuildingEval:
    """Top-1 agreement and cosine similarity of one label vs its POI vector.

    For a one-hot label the cosine reduces to ``p[label] / ||p||``.
    """
    if label is None:
        raise SkippedBuilding(f"building {building_id} is Unlabeled")
    label = FunctionClass.parse(label)
    top1 = int(poi_prob.argmax() == label)
    norm = math.sqrt(math.fsum(v * v for v in poi_prob.values))
    cosine = poi_prob[label] / norm if norm > 0 else 0.0
    cosine = min(max(cosine, 0.0), 1.0)
    onehot = ClassScores(tuple(1.0 if c == label else 0.0 for c in CLASSES), normalized=True)
    return BuildingEval(building_id, poi_prob, onehot, top1, cosine,
                        w * top1 + (1.0 - w) * cosine)


@dataclass
class EvalReport:
    per_building: list
    mean_top1: float
    mean_cosine: float
    bfmi: float
    w: float
    evaluated_count: int
    excluded_count: int
    params: dict
    notes: tuple = NOTES

    def summary(self) -> dict:
        return {"bfmi": self.bfmi, "mean_top1": self.mean_top1,
                "mean_cosine": self.mean_cosine, "w": self.w,
                "evaluated_count": self.evaluated_count,
                "excluded_count": self.excluded_count, "params": self.params,
                "notes": list(self.notes)}

    def to_dict(self, per_building: bool = False) -> dict:
        d = self.summary()
        if per_building:
            d["per_building"] = [
                {"id": e.building_id, "label": e.label.label, "top1": e.top1,
                 "cosine": e.cosine, "fused": e.fused,
                 **{f"p{c + 1}": e.poi_probability.values[c] for c in range(N_CLASSES)}}
                for e in self.per_building]
        return d


def probability_surfaces(scene: Scene, params: KdeParams, threads: int = 1):
    spec = GridSpec.from_extent(scene.extent, params.cell_size, params.pad)
    xy, codes = scene.poi_xy, scene.poi_codes
    dens = [kde_density(xy[codes == int(c)], params, spec, c, threads) for c in CLASSES]
    return normalize_probability(dens, params.epsilon)


def evaluate_labeling(scene: Scene, labels: Union[Labeling, Mapping], kde_params: KdeParams = KdeParams(),
                      w: float = 0.5, threads: int = 1, surfaces=None) -> EvalReport:
    """Score a labeling of ``scene`` (Unlabeled buildings are excluded)."""
    if not 0.0 <= w <= 1.0:
        raise InvalidParams(f"w must be in [0, 1], got {w}")
    if not isinstance(labels, Labeling):
        labels = Labeling.from_mapping(scene, labels)
    if labels.building_ids != tuple(b.id for b in scene.buildings):
        labels = Labeling.from_mapping(scene, {bid: int(c) or None for bid, c in
                                               zip(labels.building_ids, labels.codes)})
    prob = surfaces if surfaces is not None else probability_surfaces(scene, kde_params, threads)
    stack, spec = _stack(prob)
    todo = [i for i in range(len(scene.buildings)) if labels.codes[i] != 0]

    def work(idx):
        out = []
        for i in idx:
            b = scene.buildings[i]
            vec = zonal_mean((stack, spec), b)
            out.append(score_building(vec, FunctionClass(int(labels.codes[i])), w, b.id))
        return out

    chunks = [todo[s:s + 2000] for s in range(0, len(todo), 2000)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    evals = [e for part in parts for e in part]
    n = len(evals)
    if n:
        top1 = np.asarray([e.top1 for e in evals], dtype=float)
        cos = np.asarray([e.cosine for e in evals])
        fused = np.asarray([e.fused for e in evals])
        mean_top1, mean_cos, bfmi = (math.fsum(top1) / n, math.fsum(cos) / n,
                                     math.fsum(fused) / n)
    else:
        mean_top1 = mean_cos = bfmi = float("nan")
    params = {"kde": asdict(kde_params), "pad": kde_params.pad,
              "grid": asdict(spec), "w": w}
    return EvalReport(evals, mean_top1, mean_cos, bfmi, w, n,
                      len(scene.buildings) - n, params)


def compare_reports(reports: Mapping[str, EvalReport]) -> dict:
    """Side-by-side metrics and deltas against the first report."""
    names = list(reports)
    base = reports[names[0]]
    table = {}
    for name in names:
        r = reports[name]
        table[name] = {"mean_top1": r.mean_top1, "mean_cosine": r.mean_cosine, "bfmi": r.bfmi,
                       "evaluated_count": r.evaluated_count}
        if name != names[0]:
            table[name]["delta_vs_" + names[0]] = {
                "mean_top1": base.mean_top1 - r.mean_top1,
                "mean_cosine": base.mean_cosine - r.mean_cosine,
                "bfmi": base.bfmi - r.bfmi}
    return table


# ---------------------------------------------------------------------------
# raster text format


def write_raster(raster: ClassRaster, path) -> None:
    """Plain-text grid: ``key value`` header lines, then rows south to north."""
    s = raster.spec
    lines = [f"origin_x {s.origin_x!r}", f"origin_y {s.origin_y!r}",
             f"cell_size {s.cell_size!r}", f"rows {s.rows}", f"cols {s.cols}",
             f"class {raster.function_class.label}", f"kind {raster.kind}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in raster.grid]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_raster(path) -> ClassRaster:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read raster {path}: {exc}") from None
    head = dict(ln.split(" ", 1) for ln in lines[:7])
    spec = GridSpec(float(head["origin_x"]), float(head["origin_y"]), float(head["cell_size"]),
                    int(head["rows"]), int(head["cols"]))
    grid = np.asarray([[float(v) for v in ln.split()] for ln in lines[7:7 + spec.rows]])
    return ClassRaster(grid.reshape(spec.rows, spec.cols), spec,
                       FunctionClass.parse(head["class"]), head["kind"])


__all__ = ["KdeParams", "GridSpec", "ClassRaster", "kde_density", "normalize_probability",
           "zonal_mean", "score_building", "BuildingEval", "EvalReport", "evaluate_labeling",
           "probability_surfaces", "compare_reports", "write_raster", "read_raster",
           "label_name"]
