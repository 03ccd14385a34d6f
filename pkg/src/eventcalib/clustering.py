"""ST-DBSCAN on normalized events with a cylindrical neighbourhood.

Two points are direct neighbours iff their planar distance is <= eps_s and
their time difference is <= eps_t (both inclusive). A point is a core point
when its neighbourhood, itself included, holds at least ``min_pts`` points.
Clusters are connected components of core points; a border point joins the
cluster of its lowest-index core neighbour. Cluster ids are assigned in order
of each cluster's smallest member index, so the result does not depend on
traversal order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

NOISE = -1


@dataclass(frozen=True)
class ClusterParams:
    eps_s: float = 0.015
    eps_t: float = 0.015
    min_pts: int = 10

    def __post_init__(self) -> None:
        if not (self.eps_s > 0 and self.eps_t > 0):
            raise ValueError("eps_s and eps_t must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")


@dataclass(frozen=True)
class ClusterSet:
    labels: np.ndarray

    @property
    def J(self) -> int:
        return int(self.labels.max(initial=NOISE) + 1)

    @property
    def clusters(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        sorted_labels = self.labels[order]
        bounds = np.searchsorted(sorted_labels, np.arange(self.J + 1))
        return [order[bounds[j] : bounds[j + 1]] for j in range(self.J)]

    @property
    def noise(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NOISE)


def _as_xyt(points) -> np.ndarray:
    xyt = getattr(points, "xyt", points)
    return np.asarray(xyt, dtype=float).reshape(-1, 3)


def _neighbour_pairs(xyt: np.ndarray, eps_s: float, eps_t: float) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs (i, j), i != j, inside the cylinder.

    Time is rescaled so the cylinder fits in a cube of half-width eps_s; a
    k-d tree box query (slightly inflated) proposes pairs and the exact
    inclusive tests decide.
    """
    scaled = xyt * np.array([1.0, 1.0, eps_s / eps_t])
    pairs = cKDTree(scaled).query_pairs(eps_s * (1 + 1e-9), p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    d = xyt[pairs[:, 0]] - xyt[pairs[:, 1]]
    ok = (d[:, 0] ** 2 + d[:, 1] ** 2 <= eps_s * eps_s) & (np.abs(d[:, 2]) <= eps_t)
    i, j = pairs[ok, 0].astype(np.int64), pairs[ok, 1].astype(np.int64)
    return np.concatenate([i, j]), np.concatenate([j, i])


def _labels_from_pairs(n: int, src: np.ndarray, dst: np.ndarray, min_pts: int) -> np.ndarray:
    counts = np.bincount(src, minlength=n) + 1
    core = counts >= min_pts
    labels = np.full(n, NOISE, dtype=np.int64)
    if not core.any():
        return labels

    both = core[src] & core[dst]
    core_idx = np.flatnonzero(core)
    remap = np.full(n, -1, dtype=np.int64)
    remap[core_idx] = np.arange(len(core_idx))
    g = coo_matrix(
        (np.ones(both.sum(), dtype=np.int8), (remap[src[both]], remap[dst[both]])),
        shape=(len(core_idx), len(core_idx)),
    )
    _, comp = connected_components(g, directed=False)
    labels[core_idx] = comp

    # border points: lowest-index core neighbour wins
    border = ~core[src] & core[dst]
    if border.any():
        b_src, b_dst = src[border], dst[border]
        best = np.full(n, n, dtype=np.int64)
        np.minimum.at(best, b_src, b_dst)
        has = best < n
        labels[has] = labels[best[has]]

    # canonical ids: by smallest member index
    present = labels >= 0
    uniq_comp = np.unique(labels[present])
    first_member = np.full(uniq_comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(first_member, labels[present], np.flatnonzero(present))
    rank = np.empty_like(first_member)
    ordered = uniq_comp[np.argsort(first_member[uniq_comp], kind="stable")]
    rank[ordered] = np.arange(len(ordered))
    labels[present] = rank[labels[present]]
    return labels


def st_dbscan(points, cfg: ClusterParams = ClusterParams()) -> ClusterSet:
    """Cluster normalized (x, y, t) points; ``points`` is (n, 3) or NormalizedEvents.

    Polarity is never consulted.
    """
    xyt = _as_xyt(points)
    if len(xyt) == 0:
        return ClusterSet(np.zeros(0, dtype=np.int64))
    src, dst = _neighbour_pairs(xyt, cfg.eps_s, cfg.eps_t)
    return ClusterSet(_labels_from_pairs(len(xyt), src, dst, cfg.min_pts))


def brute_force_dbscan(points, cfg: ClusterParams = ClusterParams()) -> ClusterSet:
    """O(n^2) reference with the same contract as :func:`st_dbscan`."""
    xyt = _as_xyt(points)
    n = len(xyt)
    if n == 0:
        return ClusterSet(np.zeros(0, dtype=np.int64))
    adj = np.empty((n, n), dtype=bool)
    for a in range(0, n, 512):
        blk = xyt[a : a + 512]
        dx = blk[:, None, 0] - xyt[None, :, 0]
        dy = blk[:, None, 1] - xyt[None, :, 1]
        dt = np.abs(blk[:, None, 2] - xyt[None, :, 2])
        adj[a : a + 512] = (dx * dx + dy * dy <= cfg.eps_s * cfg.eps_s) & (dt <= cfg.eps_t)
    core = adj.sum(axis=1) >= cfg.min_pts  # diagonal counts the point itself
    np.fill_diagonal(adj, False)

    labels = np.full(n, NOISE, dtype=np.int64)
    comp = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for seed in range(n):
        if not core[seed] or comp[seed] >= 0:
            continue
        comp[seed] = next_id
        stack = [seed]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adj[i] & core):
                if comp[j] < 0:
                    comp[j] = next_id
                    stack.append(j)
        next_id += 1
    labels[core] = comp[core]
    for i in np.flatnonzero(~core):
        nb = np.flatnonzero(adj[i] & core)
        if len(nb):
            labels[i] = comp[nb[0]]
    # seeds are visited in index order, but a border point can carry a lower
    # index than every core point of its cluster; renumber canonically
    out = np.full(n, NOISE, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i in range(n):
        if labels[i] >= 0:
            if labels[i] not in mapping:
                mapping[labels[i]] = len(mapping)
            out[i] = mapping[labels[i]]
    return ClusterSet(out)


def same_partition(a: ClusterSet, b: ClusterSet) -> bool:
    """True when both label arrays describe the same partition up to renaming."""
    la, lb = np.asarray(a.labels), np.asarray(b.labels)
    if la.shape != lb.shape:
        return False
    if not np.array_equal(la == NOISE, lb == NOISE):
        return False
    m = la != NOISE
    pairs = set(zip(la[m].tolist(), lb[m].tolist()))
    return len(pairs) == len(set(la[m].tolist())) == len(set(lb[m].tolist()))
