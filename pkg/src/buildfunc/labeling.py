"""Three-stage building labeling.

Stage 1 scores each building from the POIs it contains or is nearest to,
stage 2 smooths labels by k-nearest-neighbour majority vote, stage 3
overrides labels inside the buffers of high-level POIs.

Labels are carried in a :class:`Labeling`, an array-backed sequence of
:class:`~buildfunc.model.LabelState`. Class codes are ``1..5``; ``0`` means
Unlabeled.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (BuildFuncError, InvalidParams, IoError, KTooLarge, PipelineError,
                     PipelineOrderError, UnknownIds)
from .geometry import SpatialIndex
from .ingest import Scene, sha256_json
from .model import N_CLASSES, ClassScores, FunctionClass, LabelState, Stage, check_high_level, label_name, parse_label

log = logging.getLogger(__name__)

ALPHA_RANGE = (0.3, 1.0)
UNLABELED = 0


@dataclass(frozen=True)
class Stage1Params:
    """Power-decay exponent ``alpha`` and POI assignment radius ``d_max`` (m)."""

    alpha: float = 0.5
    d_max: float = 50.0

    def __post_init__(self):
        alpha = float(self.alpha)
        if not math.isfinite(alpha):
            raise InvalidParams(f"alpha must be finite, got {self.alpha}")
        lo, hi = ALPHA_RANGE
        if not lo <= alpha <= hi:
            clamped = min(max(alpha, lo), hi)
            warnings.warn(f"alpha={alpha} outside [{lo}, {hi}], clamped to {clamped}",
                          stacklevel=3)
            alpha = clamped
        object.__setattr__(self, "alpha", alpha)
        if not (math.isfinite(self.d_max) and self.d_max > 0):
            raise InvalidParams(f"d_max must be > 0, got {self.d_max}")


@dataclass(frozen=True)
class Stage2Params:
    k: int = 7
    max_iterations: int = 10
    convergence_epsilon: float = 0.0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvalidParams(f"k must be an integer >= 1, got {self.k}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise InvalidParams(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0.0 <= self.convergence_epsilon < 1.0:
            raise InvalidParams(
                f"convergence_epsilon must be in [0, 1), got {self.convergence_epsilon}")


class ConflictRule(str, enum.Enum):
    NEAREST_POI = "nearest_poi"
    SMALLEST_RADIUS_RATIO = "smallest_radius_ratio"


class MembershipTest(str, enum.Enum):
    CENTROID = "centroid"
    ANY_VERTEX = "any_vertex"


@dataclass(frozen=True)
class CorrectionParams:
    conflict_rule: ConflictRule = ConflictRule.NEAREST_POI
    membership_test: MembershipTest = MembershipTest.CENTROID

    def __post_init__(self):
        try:
            object.__setattr__(self, "conflict_rule", ConflictRule(self.conflict_rule))
            object.__setattr__(self, "membership_test", MembershipTest(self.membership_test))
        except ValueError as exc:
            raise InvalidParams(str(exc)) from None


# ---------------------------------------------------------------------------
# label container


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class Labeling:
    """Per-building labels, provenance stages and optional stage-1 scores."""

    def __init__(self, building_ids: Sequence[str], codes, stages, scores=None):
        self.building_ids = tuple(building_ids)
        self.codes = _frozen(np.asarray(codes, dtype=np.int8))
        self.stages = _frozen(np.asarray(stages, dtype=np.int8))
        self.scores = None if scores is None else _frozen(np.asarray(scores, dtype=float))
        n = len(self.building_ids)
        if self.codes.shape != (n,) or self.stages.shape != (n,):
            raise ValueError("codes/stages must have one entry per building")
        if self.scores is not None and self.scores.shape != (n, N_CLASSES):
            raise ValueError("scores must be (n_buildings, 5)")
        if ((self.codes < 0) | (self.codes > N_CLASSES)).any():
            raise ValueError("label codes must be in 0..5")

    def __len__(self) -> int:
        return len(self.building_ids)

    def __getitem__(self, i: int) -> LabelState:
        code = int(self.codes[i])
        sv = None if self.scores is None else ClassScores(tuple(self.scores[i]))
        return LabelState(self.building_ids[i], FunctionClass(code) if code else None,
                          Stage(int(self.stages[i])), sv)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Labeling):
            return NotImplemented
        same_scores = (self.scores is None and other.scores is None) or (
            self.scores is not None and other.scores is not None
            and np.array_equal(self.scores, other.scores))
        return (self.building_ids == other.building_ids
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.stages, other.stages) and same_scores)

    def states(self) -> list[LabelState]:
        return list(self)

    def replace(self, codes=None, stages=None) -> "Labeling":
        return Labeling(self.building_ids, self.codes if codes is None else codes,
                        self.stages if stages is None else stages, self.scores)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.codes != UNLABELED

    def as_dict(self) -> dict:
        return {bid: int(c) for bid, c in zip(self.building_ids, self.codes)}

    def accuracy(self, truth: Mapping[str, FunctionClass], mask=None) -> float:
        """Fraction of buildings (optionally masked) whose label equals ``truth``."""
        expected = np.asarray([int(truth[b]) for b in self.building_ids])
        hit = self.codes == expected
        if mask is not None:
            hit = hit[np.asarray(mask)]
        return float(hit.mean()) if len(hit) else float("nan")

    def records(self) -> list[dict]:
        out = []
        for i, bid in enumerate(self.building_ids):
            rec = {"id": bid, "label": label_name(int(self.codes[i])),
                   "code": int(self.codes[i]), "stage": Stage(int(self.stages[i])).name}
            if self.scores is not None:
                for c in range(N_CLASSES):
                    rec[f"s{c + 1}"] = float(self.scores[i, c])
            out.append(rec)
        return out

    def digest(self) -> str:
        payload = {"ids": list(self.building_ids), "codes": self.codes.tolist(),
                   "stages": self.stages.tolist(),
                   "scores": None if self.scores is None else self.scores.tolist()}
        return sha256_json(payload)

    @classmethod
    def from_states(cls, states: Sequence[LabelState]) -> "Labeling":
        scores = None
        if states and all(s.score_vector is not None for s in states):
            scores = [s.score_vector.values for s in states]
        return cls([s.building_id for s in states],
                   [0 if s.label is None else int(s.label) for s in states],
                   [int(s.stage) for s in states], scores)

    @classmethod
    def from_mapping(cls, scene: Scene, labels: Mapping[str, Optional[FunctionClass]],
                     stage: Stage = Stage.EXTERNAL) -> "Labeling":
        """External labeling keyed by building id; missing ids are Unlabeled."""
        unknown = sorted(set(labels) - set(scene.building_index))
        if unknown:
            raise UnknownIds(unknown)
        codes = [0] * len(scene.buildings)
        for bid, lab in labels.items():
            lab = parse_label(lab)
            codes[scene.building_index[bid]] = 0 if lab is None else int(lab)
        return cls([b.id for b in scene.buildings], codes, [int(stage)] * len(codes))


# ---------------------------------------------------------------------------
# stage 1


def proximity_score(d):
    """Spatial proximity ``1 / (1 + d)`` of a POI at boundary distance ``d``."""
    return 1.0 / (1.0 + np.asarray(d, dtype=float))


def category_weight(freq, alpha: float):
    """Power-decay weight ``1 / (freq + 1) ** alpha`` of a class in a block."""
    return 1.0 / np.power(np.asarray(freq, dtype=float) + 1.0, alpha)


def _chunks(n: int, size: int):
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def assign_pois(scene: Scene, d_max: float, threads: int = 1, chunk: int = 20000):
    """Attach POIs to buildings.

    A POI inside (or on) one or more footprints belongs to each of them at
    distance 0. A POI inside no footprint belongs to its single nearest
    building if that building's boundary is within ``d_max``; equal
    distances go to the lower building index.

    Returns
    -------
    building_idx, poi_idx, distance : ndarray
        Sorted by building, then POI index.
    """
    packed, xy = scene.packed, scene.poi_xy
    empty = (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))
    if len(xy) == 0:
        return empty
    tree = cKDTree(xy)

    def work(subset):
        b, p = packed.candidate_pairs(xy, d_max, subset, tree=tree)
        d, inside = packed.pair_distance(xy, b, p)
        return b, p, d, inside

    parts = _map(work, _chunks(packed.n, chunk), threads)
    b = np.concatenate([r[0] for r in parts])
    p = np.concatenate([r[1] for r in parts])
    d = np.concatenate([r[2] for r in parts])
    inside = np.concatenate([r[3] for r in parts])

    contained = np.zeros(len(xy), dtype=bool)
    contained[p[inside]] = True
    near = ~inside & ~contained[p] & (d <= d_max)
    nb, npi, nd = b[near], p[near], d[near]
    order = np.lexsort((nb, nd, npi))
    nb, npi, nd = nb[order], npi[order], nd[order]
    first = np.ones(len(npi), dtype=bool)
    first[1:] = npi[1:] != npi[:-1]

    bb = np.concatenate([b[inside], nb[first]])
    pp = np.concatenate([p[inside], npi[first]])
    dd = np.concatenate([np.zeros(int(inside.sum())), nd[first]])
    order = np.lexsort((pp, bb))
    return bb[order], pp[order], dd[order]


def _map(fn, items, threads: int):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def stage1_candidate_labels(scene: Scene, params: Stage1Params = Stage1Params(),
                            threads: int = 1) -> Labeling:
    """Score every building per class and label it with the argmax.

    Score of class ``c`` for building ``i`` is the sum, over the building's
    POIs of class ``c``, of ``category_weight * proximity_score``, with the
    class frequency taken from the block holding the building's centroid.
    Buildings without POIs are Unlabeled.
    """
    if not scene.has_block_frequencies:
        raise PipelineOrderError("block frequencies must be computed before stage 1")
    n = len(scene.buildings)
    b, p, d = assign_pois(scene, params.d_max, threads)
    cls = scene.poi_codes[p] - 1
    freq = scene.building_freqs[b, cls]
    contrib = category_weight(freq, params.alpha) * proximity_score(d)
    scores = np.zeros((n, N_CLASSES))
    np.add.at(scores, (b, cls), contrib)
    has = np.bincount(b, minlength=n) > 0
    codes = np.where(has, scores.argmax(axis=1) + 1, UNLABELED)
    log.info("stage 1: %d/%d buildings labeled from %d POI assignments",
             int(has.sum()), n, len(b))
    return Labeling([bl.id for bl in scene.buildings], codes,
                    np.full(n, int(Stage.CANDIDATE)), scores)


# ---------------------------------------------------------------------------
# stage 2


class RefineResult(NamedTuple):
    labels: Labeling
    iterations_used: int
    change_counts: list
    oscillation_detected: bool
    history: Optional[list] = None


def neighbor_table(scene: Scene, k: int) -> np.ndarray:
    """``(n, k)`` positional indices of each building's k nearest centroids.

    The building itself is excluded; equal distances go to the lower index,
    which is also id order since scenes are sorted by id.
    """
    n = len(scene.buildings)
    if k >= n:
        raise KTooLarge(f"k={k} must be smaller than the building count {n}")
    index = SpatialIndex(scene.centroids)
    return index.knn_indices(scene.centroids, k, exclude=np.arange(n))


def majority_step(codes: np.ndarray, neighbors: np.ndarray, k: int) -> np.ndarray:
    """One synchronous vote: adopt the neighbours' majority label when its
    count exceeds ``k / 2``. Unlabeled neighbours never vote."""
    nl = codes[neighbors]
    counts = np.stack([(nl == c).sum(axis=1) for c in range(1, N_CLASSES + 1)], axis=1)
    phi = counts.max(axis=1)
    winner = counts.argmax(axis=1) + 1
    return np.where(2 * phi > k, winner, codes).astype(codes.dtype)


def stage2_refine(labels: Labeling, scene: Scene, params: Stage2Params = Stage2Params(),
                  keep_history: bool = False) -> RefineResult:
    """Iterate the neighbourhood majority vote until the changed fraction is at
    most ``convergence_epsilon`` or ``max_iterations`` is reached."""
    n = len(labels)
    neighbors = neighbor_table(scene, params.k)
    codes = labels.codes.astype(np.int64)
    stages = labels.stages.copy()
    history = [codes.copy()] if keep_history else None
    changes, seen = [], [codes.copy()]
    oscillating = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        new = majority_step(codes, neighbors, params.k)
        changed = new != codes
        changes.append(int(changed.sum()))
        stages[changed] = Stage.REFINED
        codes = new
        if keep_history:
            history.append(codes.copy())
        if changes[-1] and len(seen) >= 2 and np.array_equal(codes, seen[-2]):
            oscillating = True
        seen = (seen + [codes.copy()])[-2:]
        if changes[-1] / n <= params.convergence_epsilon:
            break
    if oscillating:
        log.warning("stage 2: label oscillation detected (period 2)")
    return RefineResult(labels.replace(codes=codes, stages=stages), it, changes,
                        oscillating, history)


# ---------------------------------------------------------------------------
# stage 3


def _buffer_hits(scene: Scene, centers, radii, params: CorrectionParams):
    """(building, poi, distance) for every membership point inside a buffer;
    with several vertices per building the closest one is kept."""
    slack = 1e-9
    if params.membership_test is MembershipTest.CENTROID:
        pts = scene.centroids
        owner = np.arange(len(pts))
    else:
        pts = scene.packed.edge_a
        owner = np.repeat(np.arange(scene.packed.n), scene.packed.edge_count)
    tree = cKDTree(pts)
    hits = tree.query_ball_point(centers, radii * (1 + slack) + 1e-9)
    counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
    h_idx = np.repeat(np.arange(len(centers)), counts)
    v_idx = np.fromiter((i for h in hits for i in sorted(h)), dtype=np.int64,
                        count=int(counts.sum()))
    dx = pts[v_idx, 0] - centers[h_idx, 0]
    dy = pts[v_idx, 1] - centers[h_idx, 1]
    d2 = dx * dx + dy * dy
    keep = d2 <= radii[h_idx] * radii[h_idx]
    b, h, d2 = owner[v_idx[keep]], h_idx[keep], d2[keep]
    order = np.lexsort((d2, h, b))
    b, h, d2 = b[order], h[order], d2[order]
    first = np.ones(len(b), dtype=bool)
    first[1:] = (b[1:] != b[:-1]) | (h[1:] != h[:-1])
    return b[first], h[first], np.sqrt(d2[first])


def stage3_correct(labels: Labeling, scene: Scene,
                   params: CorrectionParams = CorrectionParams()) -> tuple[Labeling, int]:
    """Relabel buildings that fall inside high-level POI buffers.

    A building inside several buffers takes the class of the POI chosen by
    the conflict rule (nearest, or smallest distance/radius), ties going to
    the lowest POI id. Returns the new labels and the number of buildings
    whose class actually changed.
    """
    high = scene.high_level_pois
    for poi in high:
        check_high_level(poi)
    if not high:
        return labels, 0
    centers = np.asarray([p.location for p in high], dtype=float)
    radii = np.asarray([p.buffer_radius for p in high], dtype=float)
    classes = np.asarray([int(p.function_class) for p in high], dtype=np.int64)
    b, h, d = _buffer_hits(scene, centers, radii, params)
    key = d if params.conflict_rule is ConflictRule.NEAREST_POI else d / radii[h]
    # scene POIs are id-sorted, so the position in `high` is the id order
    order = np.lexsort((h, key, b))
    b, h = b[order], h[order]
    first = np.ones(len(b), dtype=bool)
    first[1:] = b[1:] != b[:-1]
    b, h = b[first], h[first]
    codes = labels.codes.astype(np.int64)
    stages = labels.stages.copy()
    new = classes[h]
    corrections = int((codes[b] != new).sum())
    codes[b] = new
    stages[b] = Stage.CORRECTED
    log.info("stage 3: %d buildings in buffers, %d relabeled", len(b), corrections)
    return labels.replace(codes=codes, stages=stages), corrections


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineRun:
    labels: Labeling
    stage1: Labeling
    stage2: Labeling
    per_stage_change_counts: dict
    stage2_change_counts: list
    iterations_used: int
    oscillation_detected: bool
    params: dict
    scene_digest: str
    digest: str = field(init=False)

    def __post_init__(self):
        self.digest = self.labels.digest()

    def manifest(self) -> dict:
        return {
            "params": self.params,
            "scene_digest": self.scene_digest,
            "labels_digest": self.digest,
            "stage1_digest": self.stage1.digest(),
            "stage2_digest": self.stage2.digest(),
            "iterations_used": self.iterations_used,
            "stage2_change_counts": self.stage2_change_counts,
            "oscillation_detected": self.oscillation_detected,
            "per_stage_change_counts": self.per_stage_change_counts,
            "label_counts": {label_name(c): int((self.labels.codes == c).sum())
                             for c in range(N_CLASSES + 1)},
        }


def params_snapshot(stage1: Stage1Params, stage2: Stage2Params,
                    stage3: CorrectionParams) -> dict:
    s3 = {k: v.value for k, v in asdict(stage3).items()}
    return {"stage1": asdict(stage1), "stage2": asdict(stage2), "stage3": s3}


def run_pipeline(scene: Scene, stage1: Stage1Params = Stage1Params(),
                 stage2: Stage2Params = Stage2Params(),
                 stage3: CorrectionParams = CorrectionParams(),
                 threads: int = 1) -> PipelineRun:
    """Run stages 1 -> 2 -> 3; failures are re-raised as PipelineError(stage)."""
    try:
        s1 = stage1_candidate_labels(scene, stage1, threads)
    except BuildFuncError as exc:
        raise PipelineError(1, exc) from exc
    try:
        refined = stage2_refine(s1, scene, stage2)
    except BuildFuncError as exc:
        raise PipelineError(2, exc) from exc
    try:
        final, corrections = stage3_correct(refined.labels, scene, stage3)
    except BuildFuncError as exc:
        raise PipelineError(3, exc) from exc
    counts = {
        "stage1_labeled": int(s1.labeled_mask.sum()),
        "stage1_unlabeled": int((~s1.labeled_mask).sum()),
        "stage2_changed": int((refined.labels.codes != s1.codes).sum()),
        "stage3_corrected": corrections,
    }
    return PipelineRun(final, s1, refined.labels, counts, refined.change_counts,
                       refined.iterations_used, refined.oscillation_detected,
                       params_snapshot(stage1, stage2, stage3), scene.digest())


# ---------------------------------------------------------------------------
# label files


def labels_geojson(scene: Scene, labels: Labeling) -> dict:
    from .ingest import footprints_geojson

    extra = {rec["id"]: {k: v for k, v in rec.items() if k != "id"} for rec in labels.records()}
    return footprints_geojson(scene.buildings, extra)


def write_labels(scene: Scene, labels: Labeling, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(labels_geojson(scene, labels), fh, indent=1)
        fh.write("\n")


def read_labels(path, scene: Scene) -> Labeling:
    """Read a label file keyed by building id (GeoJSON or CSV ``id,label``).

    Buildings absent from the file are Unlabeled; ids not in the scene raise
    UnknownIds.
    """
    p = Path(path)
    mapping = {}
    try:
        if p.suffix.lower() == ".csv":
            with open(p, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    mapping[str(row["id"])] = row.get("label") or row.get("code")
        else:
            with open(p, encoding="utf-8") as fh:
                doc = json.load(fh)
            for feat in doc.get("features", []):
                props = feat.get("properties") or {}
                mapping[str(props["id"])] = props.get("code", props.get("label"))
    except OSError as exc:
        raise IoError(f"cannot read labels {path}: {exc}") from None
    except (KeyError, json.JSONDecodeError) as exc:
        raise IoError(f"malformed label file {path}: {exc}") from None
    try:
        parsed = {k: parse_label(v) for k, v in mapping.items()}
    except ValueError as exc:
        raise IoError(f"{path}: {exc}") from None
    return Labeling.from_mapping(scene, parsed)
