"""Planar geometry kernel.

All coordinates are planar meters. Polygons are stored as tuples of
``(x, y)`` float pairs without the repeated closing vertex; holes are
optional. The bulk helpers at the bottom operate on many polygons at once
and are what the labeling stages use.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, EmptyIndex, InvalidParams

Point = tuple[float, float]
Ring = tuple[Point, ...]

# relative slack used when comparing our own distances against cKDTree's
_TREE_SLACK = 1e-9


def _as_ring(coords: Iterable[Sequence[float]]) -> Ring:
    ring = tuple((float(x), float(y)) for x, y, *_ in coords)
    if len(ring) > 1 and ring[0] == ring[-1]:
        ring = ring[:-1]
    return ring


def ring_signed_area(ring: Sequence[Point]) -> float:
    """Shoelace area; positive for counter-clockwise rings."""
    a = np.asarray(ring, dtype=float)
    x, y = a[:, 0], a[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return float(0.5 * np.sum(x * yn - xn * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


@dataclass(frozen=True)
class Polygon:
    """Simple planar polygon, optionally with holes.

    Construction rejects rings with fewer than three distinct vertices and
    polygons without positive area. Self-intersection is checked separately
    by :meth:`is_simple` since it is quadratic in the vertex count.
    """

    exterior: Ring
    holes: tuple[Ring, ...] = ()

    def __post_init__(self):
        ext = _as_ring(self.exterior)
        holes = tuple(_as_ring(h) for h in self.holes)
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "holes", holes)
        for ring in (ext, *holes):
            if len(set(ring)) < 3:
                raise DegenerateGeometry("ring needs at least 3 distinct vertices")
            if not all(np.isfinite(c) for pt in ring for c in pt):
                raise DegenerateGeometry("non-finite coordinate")
        if self.area <= 0.0:
            raise DegenerateGeometry("polygon has zero area")

    @classmethod
    def box(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "Polygon":
        return cls(((xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)))

    @property
    def rings(self) -> tuple[Ring, ...]:
        return (self.exterior, *self.holes)

    @cached_property
    def area(self) -> float:
        a = abs(ring_signed_area(self.exterior))
        return a - sum(abs(ring_signed_area(h)) for h in self.holes)

    @cached_property
    def centroid(self) -> Point:
        cx = cy = total = 0.0
        for k, ring in enumerate(self.rings):
            a = np.asarray(ring, dtype=float)
            x, y = a[:, 0], a[:, 1]
            xn, yn = np.roll(x, -1), np.roll(y, -1)
            cross = x * yn - xn * y
            signed = 0.5 * cross.sum()
            sign = 1.0 if k == 0 else -1.0
            # orient each ring so exterior counts positive and holes negative
            if signed < 0:
                cross = -cross
                signed = -signed
            cx += sign * float(np.sum((x + xn) * cross)) / 6.0
            cy += sign * float(np.sum((y + yn) * cross)) / 6.0
            total += sign * signed
        return (cx / total, cy / total)

    @cached_property
    def bounds(self) -> tuple[float, float, float, float]:
        a = np.asarray(self.exterior, dtype=float)
        return (float(a[:, 0].min()), float(a[:, 1].min()),
                float(a[:, 0].max()), float(a[:, 1].max()))

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge start and end points over all rings, each ``(E, 2)``."""
        starts, ends = [], []
        for ring in self.rings:
            a = np.asarray(ring, dtype=float)
            starts.append(a)
            ends.append(np.roll(a, -1, axis=0))
        return np.concatenate(starts), np.concatenate(ends)

    def is_simple(self) -> bool:
        """True when no two non-adjacent edges touch, across all rings."""
        segs = []
        for r, ring in enumerate(self.rings):
            n = len(ring)
            for i in range(n):
                segs.append((r, i, n, ring[i], ring[(i + 1) % n]))
        for a in range(len(segs)):
            ra, ia, na, p1, p2 = segs[a]
            for b in range(a + 1, len(segs)):
                rb, ib, nb, q1, q2 = segs[b]
                if ra == rb and (ib == (ia + 1) % na or ia == (ib + 1) % na):
                    # adjacent edges share one vertex; only collinear overlap is bad
                    shared = p2 if ib == (ia + 1) % na else p1
                    other_p = p1 if shared == p2 else p2
                    other_q = q2 if shared == q1 else q1
                    v = ((other_p[0] - shared[0]) * (other_q[1] - shared[1])
                         - (other_p[1] - shared[1]) * (other_q[0] - shared[0]))
                    dot = ((other_p[0] - shared[0]) * (other_q[0] - shared[0])
                           + (other_p[1] - shared[1]) * (other_q[1] - shared[1]))
                    if v == 0 and dot > 0:
                        return False
                    continue
                if _segments_cross(p1, p2, q1, q2):
                    return False
        return True

    def translated(self, dx: float, dy: float) -> "Polygon":
        move = lambda ring: tuple((x + dx, y + dy) for x, y in ring)  # noqa: E731
        return Polygon(move(self.exterior), tuple(move(h) for h in self.holes))

    def canonical(self) -> tuple:
        """Orientation- and rotation-independent key used for deduplication."""

        def canon(ring, ccw):
            pts = list(ring)
            if (ring_signed_area(pts) > 0) != ccw:
                pts.reverse()
            start = pts.index(min(pts))
            return tuple(pts[start:] + pts[:start])

        return (canon(self.exterior, True),
                tuple(sorted(canon(h, False) for h in self.holes)))


# ---------------------------------------------------------------------------
# scalar-style operations (vectorized over points where it is cheap)


def segment_distance(px, py, ax, ay, bx, by):
    """Euclidean distance from points to segments; broadcasts over inputs."""
    dx = bx - ax
    dy = by - ay
    len2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = ((px - ax) * dx + (py - ay) * dy) / len2
    t = np.where(len2 > 0, np.clip(t, 0.0, 1.0), 0.0)
    qx = ax + t * dx - px
    qy = ay + t * dy - py
    return np.sqrt(qx * qx + qy * qy)


def _crossings(px, py, ax, ay, bx, by):
    """Even-odd ray-crossing indicator for a +x ray from each point."""
    straddle = (ay > py) != (by > py)
    with np.errstate(invalid="ignore", divide="ignore"):
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
    return straddle & (px < xint)


def _check(poly: Polygon) -> None:
    if not isinstance(poly, Polygon):
        raise TypeError(f"expected Polygon, got {type(poly).__name__}")
    if poly.area <= 0:
        raise DegenerateGeometry("polygon has zero area")


def contains_many(poly: Polygon, points) -> np.ndarray:
    """Boolean mask of ``points`` (``(N, 2)``) inside or on ``poly``."""
    _check(poly)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    a, b = poly.edges()
    px, py = pts[:, 0:1], pts[:, 1:2]
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    odd = _crossings(px, py, ax, ay, bx, by).sum(axis=1) % 2 == 1
    on_edge = (segment_distance(px, py, ax, ay, bx, by) == 0.0).any(axis=1)
    return odd | on_edge


def contains(poly: Polygon, p: Point) -> bool:
    """Even-odd containment; boundary points count as inside."""
    return bool(contains_many(poly, [p])[0])


def boundary_distance(p: Point, poly: Polygon) -> float:
    """Shortest distance from ``p`` to the polygon boundary, 0 when inside."""
    _check(poly)
    a, b = poly.edges()
    px, py = float(p[0]), float(p[1])
    d = segment_distance(px, py, a[:, 0], a[:, 1], b[:, 0], b[:, 1])
    dmin = float(d.min())
    if dmin == 0.0:
        return 0.0
    if _crossings(px, py, a[:, 0], a[:, 1], b[:, 0], b[:, 1]).sum() % 2 == 1:
        return 0.0
    return dmin


@dataclass(frozen=True)
class Buffer:
    center: Point
    radius: float
    source_poi_id: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise InvalidParams(f"buffer radius must be finite and > 0, got {self.radius}")


def within_buffer(b: Buffer, p: Point) -> bool:
    """Closed-disk membership test."""
    dx = p[0] - b.center[0]
    dy = p[1] - b.center[1]
    return dx * dx + dy * dy <= b.radius * b.radius


# ---------------------------------------------------------------------------
# spatial indexes


def _rank(ids: Sequence) -> np.ndarray:
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


class SpatialIndex:
    """Build-once, read-many point index with exact, id-ordered ties.

    Backed by :class:`scipy.spatial.cKDTree`. Distances reported here are
    recomputed in float64 as ``sqrt(dx*dx + dy*dy)`` so they agree with a
    brute-force scan; the tree is only used to generate candidates.

    Parameters
    ----------
    points : array_like, shape (N, 2)
    ids : sequence, optional
        Orderable identifiers used for tie-breaking. Defaults to ``0..N-1``.
    """

    def __init__(self, points, ids: Sequence | None = None):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        self.points = pts
        self.points.setflags(write=False)
        self.ids = list(range(len(pts))) if ids is None else list(ids)
        if len(self.ids) != len(pts):
            raise ValueError("ids and points differ in length")
        self._rank = _rank(self.ids)
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)

    def _require(self):
        if self._tree is None:
            raise EmptyIndex("spatial index is empty")

    def _d2(self, q, idx):
        dx = self.points[idx, 0] - q[0]
        dy = self.points[idx, 1] - q[1]
        return dx * dx + dy * dy

    def range(self, q: Point, radius: float) -> list[tuple]:
        """All ``(id, distance)`` within ``radius`` (inclusive), sorted."""
        self._require()
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + _TREE_SLACK) + 1e-12),
                          dtype=np.int64)
        d2 = self._d2(q, cand)
        keep = d2 <= radius * radius
        cand, d2 = cand[keep], d2[keep]
        order = np.lexsort((self._rank[cand], d2))
        return [(self.ids[i], float(np.sqrt(d2[j]))) for j, i in zip(order, cand[order])]

    def nearest(self, q: Point) -> tuple:
        return self.k_nearest(q, 1)[0]

    def k_nearest(self, q: Point, k: int) -> list[tuple]:
        """``k`` closest ``(id, distance)`` pairs; ties by ascending id."""
        self._require()
        if k < 1:
            raise InvalidParams("k must be >= 1")
        idx = self.knn_indices(np.asarray([q], dtype=float), k)[0]
        idx = idx[idx >= 0]
        d = np.sqrt(self._d2(q, idx))
        return [(self.ids[i], float(v)) for i, v in zip(idx, d)]

    def knn_indices(self, queries, k: int, exclude=None) -> np.ndarray:
        """Positional indices of the ``k`` nearest points per query.

        Parameters
        ----------
        queries : ndarray, shape (Q, 2)
        k : int
        exclude : ndarray of int, optional
            Per-query positional index to skip (the query's own point).

        Returns
        -------
        ndarray, shape (Q, k)
            Padded with -1 when fewer than ``k`` points are available.
        """
        self._require()
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        n = len(self.points)
        extra = 0 if exclude is None else 1
        want = min(k + extra, n)
        m = min(want + 8, n)
        out = np.full((len(q), k), -1, dtype=np.int64)
        if len(q) == 0:
            return out
        _, cand = self._tree.query(q, k=m)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), m)
        dx = self.points[cand, 0] - q[:, 0:1]
        dy = self.points[cand, 1] - q[:, 1:2]
        d2 = dx * dx + dy * dy
        if exclude is not None:
            mask_self = cand == np.asarray(exclude)[:, None]
            d2 = np.where(mask_self, np.inf, d2)
        # sort each row by (d2, id rank)
        rows = np.repeat(np.arange(len(q)), m)
        order = np.lexsort((self._rank[cand].ravel(), d2.ravel(), rows)).reshape(len(q), m)
        order -= (np.arange(len(q)) * m)[:, None]
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        take = min(k, n - extra)
        if take <= 0:
            return out
        out[:, :take] = cand[:, :take]
        if m == n:
            return out
        # rows whose k-th distance touches the candidate horizon may have
        # equally distant points outside the candidate set
        kth = d2[:, take - 1]
        horizon = np.max(np.where(np.isinf(d2), -np.inf, d2), axis=1)
        unsure = np.nonzero(kth >= horizon * (1 - 4 * _TREE_SLACK))[0]
        for r in unsure:
            radius = float(np.sqrt(kth[r])) * (1 + _TREE_SLACK) + 1e-12
            c = np.asarray(self._tree.query_ball_point(q[r], radius), dtype=np.int64)
            if exclude is not None:
                c = c[c != exclude[r]]
            cd2 = self._d2(q[r], c)
            o = np.lexsort((self._rank[c], cd2))
            out[r, :take] = c[o][:take]
        return out


class PackedPolygons:
    """Many polygons flattened into edge arrays for bulk distance queries."""

    def __init__(self, polygons: Sequence[Polygon]):
        self.n = len(polygons)
        starts, ends, counts = [], [], []
        for poly in polygons:
            a, b = poly.edges()
            starts.append(a)
            ends.append(b)
            counts.append(len(a))
        self.edge_a = np.concatenate(starts) if starts else np.empty((0, 2))
        self.edge_b = np.concatenate(ends) if ends else np.empty((0, 2))
        self.edge_count = np.asarray(counts, dtype=np.int64)
        self.edge_start = np.concatenate([[0], np.cumsum(self.edge_count)[:-1]]).astype(np.int64)
        self.centroids = np.asarray([p.centroid for p in polygons], dtype=float).reshape(-1, 2)
        # every polygon lies in the disk of this radius around its centroid
        self.reach = np.zeros(self.n)
        if self.n:
            owner = np.repeat(np.arange(self.n), self.edge_count)
            v = self.edge_a - self.centroids[owner]
            r = np.sqrt(v[:, 0] ** 2 + v[:, 1] ** 2)
            np.maximum.at(self.reach, owner, r)

    def candidate_pairs(self, points, max_distance: float, poly_subset=None, tree=None):
        """(poly_index, point_index) pairs that may lie within ``max_distance``.

        The result is a superset of the exact pairs, sorted by polygon then
        point index.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        polys = np.arange(self.n) if poly_subset is None else np.asarray(poly_subset)
        if len(pts) == 0 or len(polys) == 0:
            e = np.empty(0, dtype=np.int64)
            return e, e
        tree = cKDTree(pts) if tree is None else tree
        radius = (self.reach[polys] + max_distance) * (1 + _TREE_SLACK) + 1e-9
        hits = tree.query_ball_point(self.centroids[polys], radius)
        counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
        poly_idx = np.repeat(polys, counts)
        pt_idx = np.fromiter((i for h in hits for i in sorted(h)), dtype=np.int64,
                             count=int(counts.sum()))
        return poly_idx, pt_idx

    def pair_distance(self, points, poly_idx, pt_idx):
        """Boundary distance and containment for each (polygon, point) pair.

        Returns
        -------
        dist : ndarray
            0 for points inside or on the polygon.
        inside : ndarray of bool
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        npairs = len(poly_idx)
        if npairs == 0:
            return np.empty(0), np.empty(0, dtype=bool)
        ecount = self.edge_count[poly_idx]
        offsets = np.concatenate([[0], np.cumsum(ecount)[:-1]])
        pair_of_edge = np.repeat(np.arange(npairs), ecount)
        local = np.arange(int(ecount.sum())) - offsets[pair_of_edge]
        edge = self.edge_start[poly_idx][pair_of_edge] + local
        px = pts[pt_idx, 0][pair_of_edge]
        py = pts[pt_idx, 1][pair_of_edge]
        ax, ay = self.edge_a[edge, 0], self.edge_a[edge, 1]
        bx, by = self.edge_b[edge, 0], self.edge_b[edge, 1]
        d = segment_distance(px, py, ax, ay, bx, by)
        cross = _crossings(px, py, ax, ay, bx, by).astype(np.int64)
        dmin = np.minimum.reduceat(d, offsets)
        odd = np.add.reduceat(cross, offsets) % 2 == 1
        inside = odd | (dmin == 0.0)
        return np.where(inside, 0.0, dmin), inside


def check_radius(name: str, value: float) -> float:
    value = float(value)
    if not (np.isfinite(value) and value > 0):
        raise InvalidParams(f"{name} must be finite and > 0, got {value}")
    return value
