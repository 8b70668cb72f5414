"""Naive reference implementations used to check the optimized paths.

Nothing here touches the geometry kernel, spatial indexes or labeling
internals: only core-model records and plain Python / dense numpy scans.
Slow on purpose; meant for scenes of a few hundred buildings.
"""

from __future__ import annotations

import math

import numpy as np

from .model import FunctionClass


def _rings(building):
    poly = building.polygon
    return [list(poly.exterior)] + [list(h) for h in poly.holes]


def _seg_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    if len2 > 0:
        t = ((px - ax) * dx + (py - ay) * dy) / len2
        t = min(max(t, 0.0), 1.0)
    else:
        t = 0.0
    qx = ax + t * dx - px
    qy = ay + t * dy - py
    return math.sqrt(qx * qx + qy * qy)


def point_in_rings(px, py, rings) -> bool:
    """Even-odd test with boundary points counted as inside."""
    inside = False
    for ring in rings:
        n = len(ring)
        for i in range(n):
            ax, ay = ring[i]
            bx, by = ring[(i + 1) % n]
            if _seg_dist(px, py, ax, ay, bx, by) == 0.0:
                return True
            if (ay > py) != (by > py):
                if px < ax + (py - ay) * (bx - ax) / (by - ay):
                    inside = not inside
    return inside


def boundary_distance(px, py, rings) -> float:
    if point_in_rings(px, py, rings):
        return 0.0
    best = math.inf
    for ring in rings:
        n = len(ring)
        for i in range(n):
            ax, ay = ring[i]
            bx, by = ring[(i + 1) % n]
            best = min(best, _seg_dist(px, py, ax, ay, bx, by))
    return best


def _dense_distances(scene):
    """Full POI x building matrices of boundary distance and containment."""
    pts = np.asarray([p.location for p in scene.pois], dtype=float).reshape(-1, 2)
    nb = len(scene.buildings)
    dist = np.full((len(pts), nb), np.inf)
    inside = np.zeros((len(pts), nb), dtype=bool)
    px, py = pts[:, 0], pts[:, 1]
    for j, b in enumerate(scene.buildings):
        odd = np.zeros(len(pts), dtype=bool)
        on = np.zeros(len(pts), dtype=bool)
        for ring in _rings(b):
            n = len(ring)
            for i in range(n):
                ax, ay = ring[i]
                bx, by = ring[(i + 1) % n]
                dx, dy = bx - ax, by - ay
                len2 = dx * dx + dy * dy
                t = ((px - ax) * dx + (py - ay) * dy) / len2
                t = np.minimum(np.maximum(t, 0.0), 1.0)
                qx = ax + t * dx - px
                qy = ay + t * dy - py
                d = np.sqrt(qx * qx + qy * qy)
                dist[:, j] = np.minimum(dist[:, j], d)
                on |= d == 0.0
                if ay != by:
                    xint = ax + (py - ay) * (bx - ax) / (by - ay)
                    odd ^= ((ay > py) != (by > py)) & (px < xint)
        inside[:, j] = odd | on
    dist[inside] = 0.0
    return dist, inside


def oracle_stage1(scene, alpha: float, d_max: float):
    """Exhaustive stage-1 scoring.

    Returns
    -------
    codes : list of int
        0 for Unlabeled, else the class code.
    scores : ndarray, shape (n_buildings, 5)
    """
    nb = len(scene.buildings)
    scores = np.zeros((nb, 5))
    has = [False] * nb
    if not scene.pois:
        return [0] * nb, scores
    dist, inside = _dense_distances(scene)
    freq = {blk.id: blk.poi_counts for blk in scene.blocks}
    members = [[] for _ in range(nb)]
    for i, poi in enumerate(scene.pois):
        hosts = [j for j in range(nb) if inside[i, j]]
        if hosts:
            for j in hosts:
                members[j].append((i, 0.0))
            continue
        best = None
        for j in range(nb):
            d = dist[i, j]
            if d <= d_max and (best is None or d < dist[i, best]):
                best = j
        if best is not None:
            members[best].append((i, float(dist[i, best])))
    for j, b in enumerate(scene.buildings):
        counts = freq.get(b.block_id, (0,) * 5)
        for i, d in sorted(members[j]):
            c = int(scene.pois[i].function_class)
            w = 1.0 / math.pow(counts[c - 1] + 1.0, alpha)
            scores[j, c - 1] += w * (1.0 / (1.0 + d))
            has[j] = True
    codes = []
    for j in range(nb):
        if not has[j]:
            codes.append(0)
            continue
        row = list(scores[j])
        codes.append(row.index(max(row)) + 1)
    return codes, scores


def oracle_neighbors(scene, k: int):
    cents = [b.centroid for b in scene.buildings]
    out = []
    for i, (xi, yi) in enumerate(cents):
        cand = []
        for j, (xj, yj) in enumerate(cents):
            if j == i:
                continue
            dx, dy = xj - xi, yj - yi
            cand.append((dx * dx + dy * dy, j))
        cand.sort()
        out.append([j for _, j in cand[:k]])
    return out


def oracle_stage2(codes, scene, k: int, max_iterations: int, epsilon: float = 0.0):
    """Synchronous majority-vote iteration; returns the full label history
    (initial labels first)."""
    nbrs = oracle_neighbors(scene, k)
    cur = [int(c) for c in codes]
    history = [list(cur)]
    n = len(cur)
    for _ in range(max_iterations):
        nxt = []
        for i in range(n):
            votes = {}
            for j in nbrs[i]:
                if cur[j] != 0:
                    votes[cur[j]] = votes.get(cur[j], 0) + 1
            if votes:
                phi = max(votes.values())
                winner = min(lab for lab, v in votes.items() if v == phi)
                nxt.append(winner if phi > k / 2 else cur[i])
            else:
                nxt.append(cur[i])
        changed = sum(a != b for a, b in zip(cur, nxt))
        cur = nxt
        history.append(list(cur))
        if changed / n <= epsilon:
            break
    return history


def oracle_stage3(codes, scene, rule: str = "nearest_poi"):
    """Centroid-in-buffer relabeling with the given conflict rule."""
    high = [p for p in scene.pois if p.is_high_level]  # id order
    out = [int(c) for c in codes]
    for j, b in enumerate(scene.buildings):
        cx, cy = b.centroid
        best = None
        for rank, p in enumerate(high):
            dx, dy = cx - p.location[0], cy - p.location[1]
            if dx * dx + dy * dy > p.buffer_radius ** 2:
                continue
            d = math.sqrt(dx * dx + dy * dy)
            key = d if rule == "nearest_poi" else d / p.buffer_radius
            if best is None or (key, rank) < best[:2]:
                best = (key, rank, p)
        if best is not None:
            out[j] = int(best[2].function_class)
    return out


def oracle_kde(points, x_centers, y_centers, bandwidth: float):
    """Double loop over cells and points."""
    h2 = 2.0 * bandwidth * bandwidth
    norm = 1.0 / (math.pi * h2)
    grid = np.zeros((len(y_centers), len(x_centers)))
    for r, y in enumerate(y_centers):
        for c, x in enumerate(x_centers):
            s = 0.0
            for px, py in points:
                s += math.exp(-((x - px) ** 2 + (y - py) ** 2) / h2)
            grid[r, c] = s * norm
    return grid


def oracle_zonal(stack, origin, cell_size: float, building):
    """Average of the 5-class stack over cell centers inside the footprint,
    checked one cell at a time; centroid cell when none is inside."""
    rings = _rings(building)
    nclass, rows, cols = stack.shape
    ox, oy = origin
    xs = [ox + (c + 0.5) * cell_size for c in range(cols)]
    ys = [oy + (r + 0.5) * cell_size for r in range(rows)]
    x0, y0, x1, y1 = building.polygon.bounds
    sums = [0.0] * nclass
    hits = 0
    for r, y in enumerate(ys):
        if y < y0 or y > y1:
            continue
        for c, x in enumerate(xs):
            if x < x0 or x > x1:
                continue
            if point_in_rings(x, y, rings):
                hits += 1
                for k in range(nclass):
                    sums[k] += stack[k, r, c]
    if hits:
        vec = [s / hits for s in sums]
    else:
        cx, cy = building.centroid
        c = min(max(int(math.floor((cx - ox) / cell_size)), 0), cols - 1)
        r = min(max(int(math.floor((cy - oy) / cell_size)), 0), rows - 1)
        vec = [float(stack[k, r, c]) for k in range(nclass)]
    total = sum(vec)
    return [v / total for v in vec]


def oracle_block_counts(pois, extent, size: float) -> dict:
    """Per-cell class tally by testing each POI against every grid cell."""
    x0, y0, x1, y1 = extent
    cols = max(1, math.ceil((x1 - x0) / size))
    rows = max(1, math.ceil((y1 - y0) / size))
    counts = {}
    for p in pois:
        px, py = p.location
        for r in range(rows):
            lo_y, hi_y = y0 + r * size, y0 + (r + 1) * size
            in_row = lo_y <= py < hi_y or (r == rows - 1 and py >= lo_y)
            if not in_row:
                continue
            for c in range(cols):
                lo_x, hi_x = x0 + c * size, x0 + (c + 1) * size
                if lo_x <= px < hi_x or (c == cols - 1 and px >= lo_x):
                    key = (r, c)
                    counts.setdefault(key, [0] * 5)[int(p.function_class) - 1] += 1
                    break
            break
    return counts


def cosine(p, label: FunctionClass) -> float:
    dot = p[int(label) - 1]
    return dot / math.sqrt(sum(v * v for v in p))
