"""Density-based spatial clustering of event coordinates and box extraction.

Labeling rule shared by :func:`dbscan` and :func:`brute_force_dbscan`:

* a point is *core* when at least ``min_pts`` points (itself included) lie
  within Euclidean distance ``eps``;
* clusters are the eps-connected components of core points, numbered by the
  first member in lexicographic ``(x, y, input index)`` order;
* a non-core point with a core neighbour joins the lowest-numbered adjacent
  cluster, anything else is ``NOISE``.

The rule never looks at input order, so the labeling is a pure function of
the point multiset.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

NOISE = -1
BRUTE_FORCE_MAX_POINTS = 2000


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Axis-aligned box with inclusive pixel bounds."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def shifted(self, dx: int, dy: int) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clipped(self, width: int, height: int) -> "BoundingBox | None":
        """Intersection with the sensor ``[0, width) x [0, height)``, or None."""
        x0, y0 = max(self.x_min, 0), max(self.y_min, 0)
        x1, y1 = min(self.x_max, width - 1), min(self.y_max, height - 1)
        if x0 > x1 or y0 > y1:
            return None
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 5.0
    min_pts: int = 10

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass(frozen=True)
class ClusterLabeling:
    labels: np.ndarray  # cluster id per point, NOISE for noise
    core: np.ndarray  # bool per point

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) and self.labels.max() >= 0 else 0

    def __len__(self) -> int:
        return len(self.labels)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.empty((0, 2), dtype=np.float64)
    pts = pts.reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def _empty_labeling() -> ClusterLabeling:
    return ClusterLabeling(np.empty(0, dtype=np.int64), np.empty(0, dtype=bool))


def _grid_pairs(pts: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """All ordered pairs ``(i, j)`` (self-pairs included) with distance <= eps.

    Points are hashed into square cells of side ``eps`` so every neighbour of
    a point lies in the 3x3 block of cells around it.
    """
    cells = np.floor(pts / (eps * (1.0 + 1e-12))).astype(np.int64)
    cells -= cells.min(axis=0)
    stride = int(cells[:, 1].max()) + 3
    key = (cells[:, 0] + 1) * stride + (cells[:, 1] + 1)
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    eps2 = eps * eps

    src_parts, dst_parts = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            target = key + dx * stride + dy
            lo = np.searchsorted(sorted_key, target, side="left")
            hi = np.searchsorted(sorted_key, target, side="right")
            counts = hi - lo
            total = int(counts.sum())
            if total == 0:
                continue
            src = np.repeat(np.arange(len(pts)), counts)
            # position within each run, offset by that run's start
            starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
            dst = order[starts + np.arange(total)]
            d = pts[src] - pts[dst]
            keep = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] <= eps2
            src_parts.append(src[keep])
            dst_parts.append(dst[keep])
    return np.concatenate(src_parts), np.concatenate(dst_parts)


def dbscan(points, params: DbscanParams) -> ClusterLabeling:
    """Grid-indexed DBSCAN.

    Duplicate coordinates are collapsed to one weighted site first; event
    streams repeat pixels heavily, and duplicates always share core status
    and cluster.
    """
    pts = _as_points(points)
    if len(pts) == 0:
        return _empty_labeling()

    # np.unique sorts rows lexicographically, which fixes cluster numbering
    sites, inverse, weight = np.unique(pts, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(sites)
    src, dst = _grid_pairs(sites, params.eps)

    density = np.bincount(src, weights=weight[dst], minlength=n)
    core = density >= params.min_pts

    site_label = np.full(n, NOISE, dtype=np.int64)
    core_idx = np.flatnonzero(core)
    if len(core_idx):
        both = core[src] & core[dst]
        graph = coo_matrix(
            (np.ones(int(both.sum()), dtype=np.int8), (src[both], dst[both])), shape=(n, n)
        ).tocsr()
        _, comp = connected_components(graph, directed=False)
        # renumber components by their lexicographically first core site
        first = np.full(comp.max() + 1, n, dtype=np.int64)
        np.minimum.at(first, comp[core_idx], core_idx)
        used = np.flatnonzero(first < n)
        rank = np.empty(comp.max() + 1, dtype=np.int64)
        rank[used[np.argsort(first[used], kind="stable")]] = np.arange(len(used))
        site_label[core_idx] = rank[comp[core_idx]]

        border = ~core[src] & core[dst]
        if border.any():
            cand = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
            np.minimum.at(cand, src[border], site_label[dst[border]])
            hit = (cand != np.iinfo(np.int64).max) & ~core
            site_label[hit] = cand[hit]

    return ClusterLabeling(site_label[inverse], core[inverse])


def brute_force_dbscan(points, params: DbscanParams) -> ClusterLabeling:
    """O(n^2) reference with an explicit distance matrix. Test oracle only."""
    pts = _as_points(points)
    n = len(pts)
    if n > BRUTE_FORCE_MAX_POINTS:
        raise ValueError(f"brute_force_dbscan is capped at {BRUTE_FORCE_MAX_POINTS} points, got {n}")
    if n == 0:
        return _empty_labeling()

    dx = pts[:, None, 0] - pts[None, :, 0]
    dy = pts[:, None, 1] - pts[None, :, 1]
    adj = dx * dx + dy * dy <= params.eps * params.eps
    core = adj.sum(axis=1) >= params.min_pts

    # min-label propagation over core-core edges until every component
    # carries its smallest member index
    core_ids = np.flatnonzero(core)
    core_adj = adj[np.ix_(core_ids, core_ids)]
    root = np.arange(len(core_ids))
    while len(core_ids):
        nxt = np.where(core_adj, root[None, :], len(core_ids)).min(axis=1)
        nxt = nxt[nxt]
        if np.array_equal(nxt, root):
            break
        root = nxt

    labels = np.full(n, NOISE, dtype=np.int64)
    root_of = np.full(n, -1, dtype=np.int64)
    root_of[core_ids] = root
    order = np.lexsort((np.arange(n), pts[:, 1], pts[:, 0]))
    root_label: dict[int, int] = {}
    for i in order:
        if core[i]:
            r = int(root_of[i])
            if r not in root_label:
                root_label[r] = len(root_label)
            labels[i] = root_label[r]
    for i in range(n):
        if not core[i]:
            neigh = labels[adj[i] & core]
            if len(neigh):
                labels[i] = neigh.min()
    return ClusterLabeling(labels, core)


def cluster_boxes(points, labeling: ClusterLabeling, min_cluster_size: int) -> List[Tuple[BoundingBox, int]]:
    """``(box, member_count)`` for every cluster with enough members, sorted by box origin."""
    pts = _as_points(points)
    if len(pts) != len(labeling):
        raise ValueError("labeling does not match points")
    out: List[Tuple[BoundingBox, int]] = []
    labels = labeling.labels
    for cid in range(labeling.n_clusters):
        member = pts[labels == cid]
        if len(member) < min_cluster_size:
            continue
        lo = member.min(axis=0)
        hi = member.max(axis=0)
        box = BoundingBox(math.floor(lo[0]), math.floor(lo[1]), math.ceil(hi[0]), math.ceil(hi[1]))
        out.append((box, len(member)))
    out.sort(key=lambda item: (item[0].x_min, item[0].y_min, item[0].x_max, item[0].y_max))
    return out


def boxes_from_labeling(points, labeling: ClusterLabeling, min_cluster_size: int) -> List[BoundingBox]:
    return [box for box, _ in cluster_boxes(points, labeling, min_cluster_size)]


def same_partition(a: Sequence[int], b: Sequence[int]) -> bool:
    """True when two labelings induce the same partition (ids may differ)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    if not np.array_equal(a == NOISE, b == NOISE):
        return False
    pairs = set(zip(a[a != NOISE].tolist(), b[b != NOISE].tolist()))
    lefts = {p[0] for p in pairs}
    rights = {p[1] for p in pairs}
    return len(pairs) == len(lefts) == len(rights)
