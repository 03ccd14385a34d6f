"""Grid selection among fitted circle candidates and canonical ordering.

Selection minimizes the joint spread phi = std(D) + std(r) over size-M
subsets, where D holds each member's squared distance to its nearest other
member of the same subset and r holds the fitted radii. Ordering grows the
diagonal lattice of the asymmetric grid from a seed point and then matches
the recovered lattice indices against the pattern layout.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .pattern import PatternSpec


class DetectionFailure(ValueError):
    """A window could not produce a grid detection; ``stage`` tells where."""

    def __init__(self, message: str, stage: str):
        super().__init__(message)
        self.stage = stage


@dataclass(frozen=True)
class Candidate:
    center: tuple[float, float]
    radius: float
    cluster_id: int = -1

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("candidate radius must be positive")


@dataclass(frozen=True)
class GridDetection:
    """M image points in pattern order, plus where they came from."""

    points: np.ndarray
    window_t_ref: int
    score: float
    orientation: int = 0
    # candidate index feeding each ordered point
    candidate_index: tuple[int, ...] = ()

    @property
    def M(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SelectionParams:
    delta_max: int = 8
    mad_factor: float = 3.0
    # never prune radii closer than this fraction of the median radius
    mad_floor_fraction: float = 0.15
    exact_budget: int = 250_000
    # single swaps tried, best phi first, when the selected subset is not a lattice
    repair_swaps: int = 64


@dataclass
class SelectionResult:
    indices: tuple[int, ...]
    score: float
    method: str
    pruned: tuple[int, ...] = field(default_factory=tuple)


def _centers_radii(candidates) -> tuple[np.ndarray, np.ndarray]:
    if len(candidates) and isinstance(candidates[0], Candidate):
        c = np.array([cd.center for cd in candidates], dtype=float).reshape(-1, 2)
        r = np.array([cd.radius for cd in candidates], dtype=float)
        return c, r
    c = np.asarray(candidates, dtype=float).reshape(-1, 2)
    return c, np.ones(len(c))


def _sq_dists(c: np.ndarray) -> np.ndarray:
    d = c[:, None, :] - c[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def nearest_linkages(candidates) -> np.ndarray:
    """Squared distance from each candidate to its nearest other candidate."""
    c, _ = _centers_radii(candidates)
    if len(c) < 2:
        raise DetectionFailure("need at least two candidates for linkages", "selection")
    d2 = _sq_dists(c)
    np.fill_diagonal(d2, np.inf)
    return d2.min(axis=1)


def joint_spread(centers: np.ndarray, radii: np.ndarray, subset: Sequence[int]) -> float:
    """phi for one subset, linkages recomputed inside the subset."""
    idx = np.asarray(subset, dtype=int)
    if len(idx) < 2:
        return 0.0
    D = nearest_linkages(centers[idx])
    return float(abs(np.std(D) + np.std(radii[idx])))


def exhaustive_select_grid(candidates, M: int) -> tuple[tuple[int, ...], float]:
    """Reference argmin over every size-M subset; ties go to the smallest tuple."""
    c, r = _centers_radii(candidates)
    if len(c) < M:
        raise DetectionFailure(f"{len(c)} candidates for a {M}-point grid", "selection")
    best: Optional[tuple[float, tuple[int, ...]]] = None
    for sub in itertools.combinations(range(len(c)), M):
        phi = joint_spread(c, r, sub)
        if best is None or phi < best[0]:
            best = (phi, sub)
    assert best is not None
    return best[1], best[0]


def _radius_prefilter(radii: np.ndarray, p: SelectionParams) -> np.ndarray:
    med = float(np.median(radii))
    mad = 1.4826 * float(np.median(np.abs(radii - med)))
    thr = max(p.mad_factor * mad, p.mad_floor_fraction * med)
    return np.flatnonzero(np.abs(radii - med) <= thr)


def _exact_search(c: np.ndarray, r: np.ndarray, M: int, chunk: int = 65536) -> tuple[tuple[int, ...], float]:
    J = len(c)
    e = J - M
    if e == 0:
        return tuple(range(J)), joint_spread(c, r, range(J))
    d2 = _sq_dists(c)
    np.fill_diagonal(d2, np.inf)
    # with e exclusions the subset-local nearest neighbour is among the e+1 closest
    k = min(e + 1, J - 1)
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    nbr_d = np.take_along_axis(d2, nbr, axis=1)
    d1 = nbr_d[:, 0]
    t1, t2 = d1.sum(), (d1 * d1).sum()
    r_sum, r_sq = r.sum(), (r * r).sum()

    scores = []
    combos_all = []
    for block in _combination_blocks(J, e, chunk):
        n = len(block)
        XT = np.zeros((J, n), dtype=bool)
        XT[block.T, np.arange(n)[None, :]] = True
        s1 = t1 - d1[block].sum(axis=1)
        s2 = t2 - (d1[block] ** 2).sum(axis=1)
        # only members whose nearest neighbour was excluded need a new linkage
        for i in range(J):
            aff = np.flatnonzero(XT[nbr[i, 0]] & ~XT[i])
            if aff.size == 0:
                continue
            pos = np.argmin(XT[nbr[i, 1:]][:, aff], axis=0) + 1
            D = nbr_d[i, pos]
            s1[aff] += D - d1[i]
            s2[aff] += D * D - d1[i] * d1[i]
        mD = s1 / M
        vD = np.maximum(s2 / M - mD * mD, 0.0)
        mr = (r_sum - r[block].sum(axis=1)) / M
        vr = np.maximum((r_sq - (r[block] ** 2).sum(axis=1)) / M - mr * mr, 0.0)
        scores.append(np.sqrt(vD) + np.sqrt(vr))
        combos_all.append(block)
    s = np.concatenate(scores)
    blocks = np.concatenate(combos_all)
    # one-pass sums are slightly noisy; settle the near-best set with the
    # two-pass formula and a lexicographic tie-break
    lo = float(s.min())
    near = np.flatnonzero(s <= lo + 1e-7 * max(abs(lo), 1.0))
    best = None
    for i in near:
        excl = set(blocks[i].tolist())
        sub = tuple(j for j in range(J) if j not in excl)
        phi = joint_spread(c, r, sub)
        if best is None or (phi, sub) < best:
            best = (phi, sub)
    assert best is not None
    return best[1], best[0]


def _combination_blocks(J: int, e: int, chunk: int) -> Iterable[np.ndarray]:
    it = itertools.chain.from_iterable(itertools.combinations(range(J), e))
    total = math.comb(J, e)
    done = 0
    while done < total:
        n = min(chunk, total - done)
        yield np.fromiter(it, dtype=np.int64, count=n * e).reshape(n, e)
        done += n


def _local_search(c: np.ndarray, r: np.ndarray, M: int) -> tuple[tuple[int, ...], float]:
    J = len(c)
    keep = list(range(J))
    while len(keep) > M:
        trials = [(joint_spread(c, r, keep[:i] + keep[i + 1 :]), i) for i in range(len(keep))]
        _, drop = min(trials)
        del keep[drop]
    cur = joint_spread(c, r, keep)
    improved = True
    while improved:
        improved = False
        out = [j for j in range(J) if j not in keep]
        for a in range(M):
            for b in out:
                sub = sorted(keep[:a] + keep[a + 1 :] + [b])
                phi = joint_spread(c, r, sub)
                if phi < cur - 1e-12:
                    keep, cur, improved = sub, phi, True
                    break
            if improved:
                break
    return tuple(sorted(keep)), cur


def select_grid(candidates, M: int, params: SelectionParams = SelectionParams()) -> SelectionResult:
    """Pick the M candidates that best form a uniform grid.

    Every subset is scored when C(J, J - M) fits ``exact_budget``. Otherwise
    radius outliers (beyond mad_factor * MAD of the median radius) are pruned,
    windows with more than ``delta_max`` surplus candidates are rejected, and
    the remainder is searched exactly if affordable or by greedy elimination
    with swap refinement. The result is independent of candidate input order.
    """
    c, r = _centers_radii(candidates)
    J = len(c)
    if J < M:
        raise DetectionFailure(f"{J} candidates for a {M}-point grid", "selection")
    # canonical order makes the search and its tie-breaks input-order invariant
    order = np.lexsort((r, c[:, 1], c[:, 0]))
    cs, rs = c[order], r[order]

    pool = np.arange(J)
    method = "exact"
    if math.comb(J, J - M) > params.exact_budget:
        pool = _radius_prefilter(rs, params)
        if len(pool) < M:
            raise DetectionFailure("radius pruning left fewer candidates than grid points", "selection")
        if len(pool) - M > params.delta_max:
            raise DetectionFailure(
                f"{len(pool) - M} surplus candidates exceed the limit of {params.delta_max}", "selection"
            )
        if math.comb(len(pool), len(pool) - M) > params.exact_budget:
            method = "local"
    if method == "exact":
        sub, phi = _exact_search(cs[pool], rs[pool], M)
    else:
        sub, phi = _local_search(cs[pool], rs[pool], M)
    chosen = tuple(sorted(int(order[pool[i]]) for i in sub))
    pruned = tuple(sorted(int(order[i]) for i in set(range(J)) - set(pool.tolist())))
    return SelectionResult(chosen, phi, method, pruned)


# ordering ---------------------------------------------------------------

_ROTATIONS = (
    np.array([[1, 0], [0, 1]]),
    np.array([[0, -1], [1, 0]]),
    np.array([[-1, 0], [0, -1]]),
    np.array([[0, 1], [-1, 0]]),
)


def _fit_map(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography (>= 5 points) or affine map as a 3x3 matrix."""
    n = len(src)
    if n >= 5:
        A = np.zeros((2 * n, 9))
        A[0::2, 0:2] = src
        A[0::2, 2] = 1
        A[0::2, 6:8] = -dst[:, :1] * src
        A[0::2, 8] = -dst[:, 0]
        A[1::2, 3:5] = src
        A[1::2, 5] = 1
        A[1::2, 6:8] = -dst[:, 1:] * src
        A[1::2, 8] = -dst[:, 1]
        _, sv, vt = np.linalg.svd(A)
        if sv[-2] > 1e-9 * sv[0]:
            H = vt[-1].reshape(3, 3)
            if abs(H[2, 2]) > 1e-12:
                return H / H[2, 2]
    A = np.column_stack([src, np.ones(n)])
    sol, *_ = np.linalg.lstsq(A, dst, rcond=None)
    H = np.eye(3)
    H[:2, :] = sol.T
    return H


def _apply(H: np.ndarray, q: np.ndarray) -> np.ndarray:
    v = H @ np.array([q[0], q[1], 1.0])
    return v[:2] / v[2]


def _grow_lattice(pts: np.ndarray, tol: float) -> dict[tuple[int, int], int]:
    """Assign diagonal-lattice coordinates (a, b) to image points."""
    n = len(pts)
    d2 = _sq_dists(pts)
    np.fill_diagonal(d2, np.inf)
    seed = int(np.argmin(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    nn = np.argsort(d2[seed])[:4]
    vec = pts[nn] - pts[seed]
    e1 = vec[0]
    opp = int(np.argmin(vec @ e1 / np.linalg.norm(vec, axis=1)))
    rest = [i for i in range(4) if i not in (0, opp)]
    if opp == 0 or len(rest) != 2:
        raise DetectionFailure("seed neighbourhood is not a lattice cross", "ordering")
    e2 = vec[rest[0]]
    assign = {(0, 0): seed, (1, 0): int(nn[0]), (-1, 0): int(nn[opp]), (0, 1): int(nn[rest[0]]), (0, -1): int(nn[rest[1]])}
    # the opposite pair must really be opposite
    if np.dot(vec[rest[1]], e2) > 0 or np.dot(vec[opp], e1) > 0:
        raise DetectionFailure("seed neighbourhood is not a lattice cross", "ordering")
    used = set(assign.values())
    if len(used) != 5:
        raise DetectionFailure("seed neighbourhood is degenerate", "ordering")

    steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    while len(used) < n:
        frontier: dict[tuple[int, int], int] = {}
        for (a, b) in assign:
            for da, db in steps:
                q = (a + da, b + db)
                if q not in assign:
                    frontier[q] = frontier.get(q, 0) + 1
        progress = False
        for q, _ in sorted(frontier.items(), key=lambda kv: (-kv[1], kv[0])):
            keys = [k for k in assign if abs(k[0] - q[0]) <= 2 and abs(k[1] - q[1]) <= 2]
            if len(keys) < 3:
                continue
            src = np.array(keys, dtype=float)
            dst = pts[[assign[k] for k in keys]]
            if np.linalg.matrix_rank(src - src.mean(axis=0), tol=1e-9) < 2:
                continue
            H = _fit_map(src, dst)
            pred = _apply(H, np.array(q, dtype=float))
            step = np.linalg.norm(pred - _apply(H, np.array(q, dtype=float) + np.array([1.0, 0.0])))
            step = min(step, np.linalg.norm(pred - _apply(H, np.array(q, dtype=float) + np.array([0.0, 1.0]))))
            dist = np.linalg.norm(pts - pred, axis=1)
            j = int(np.argmin(dist))
            if dist[j] <= tol * step:
                if j in used:
                    raise DetectionFailure("a point matched two lattice sites", "ordering")
                assign[q] = j
                used.add(j)
                progress = True
        if not progress:
            break
    return assign


def _pattern_sites(spec: PatternSpec) -> dict[tuple[int, int], int]:
    return {(int(c), int(h)): k for k, (c, h) in enumerate(spec.lattice_indices())}


def order_grid_points(
    points,
    spec: PatternSpec,
    window_t_ref: int = 0,
    score: float = float("nan"),
    candidate_index: Sequence[int] | None = None,
    tol: float = 0.35,
) -> GridDetection:
    """Put M selected image points into pattern order.

    The lattice is recovered in diagonal coordinates, converted to
    (column, half-row) indices, made right-handed in the image, and then
    matched against the pattern layout under the four image rotations. The
    asymmetric offset rules out 180-degree matches for odd column counts;
    any remaining ambiguity fails the window.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) != spec.M:
        raise DetectionFailure(f"expected {spec.M} points, got {len(pts)}", "ordering")
    if spec.M == 1:
        return GridDetection(pts.copy(), window_t_ref, score, 0, tuple(candidate_index or (0,)))
    if spec.M < 5:
        raise DetectionFailure("ordering needs at least five grid points", "ordering")
    assign = _grow_lattice(pts, tol)
    if len(assign) != spec.M:
        raise DetectionFailure(f"lattice growth reached {len(assign)} of {spec.M} points", "ordering")

    ab = np.array(list(assign.keys()))
    idx = np.array(list(assign.values()))
    ch = np.column_stack([ab[:, 0] + ab[:, 1], ab[:, 0] - ab[:, 1]])
    # orientation of the (c, h) -> image map; the pattern is viewed from its front
    H = _fit_map(ch.astype(float), pts[idx])
    J = H[:2, :2] - np.outer(H[:2, 2], H[2, :2])
    if np.linalg.det(J) < 0:
        ch[:, 1] = -ch[:, 1]

    sites = _pattern_sites(spec)
    matches = []
    for k, Rm in enumerate(_ROTATIONS):
        q = ch @ Rm.T
        q = q - q.min(axis=0)
        keys = [(int(a), int(b)) for a, b in q]
        if all(key in sites for key in keys) and len(set(keys)) == spec.M:
            matches.append((k, [sites[key] for key in keys]))
    if len(matches) != 1:
        raise DetectionFailure(
            "lattice does not match the pattern" if not matches else "pattern orientation is ambiguous", "ordering"
        )
    k, slots = matches[0]
    ordered = np.empty_like(pts)
    src_index = np.empty(spec.M, dtype=int)
    ordered[slots] = pts[idx]
    src_index[slots] = idx
    if candidate_index is not None:
        src_index = np.asarray(candidate_index)[src_index]
    return GridDetection(ordered, window_t_ref, score, k, tuple(int(i) for i in src_index))


def detect_grid(
    candidates: Sequence[Candidate],
    spec: PatternSpec,
    window_t_ref: int = 0,
    params: SelectionParams = SelectionParams(),
) -> GridDetection:
    """select_grid followed by order_grid_points.

    If the selected subset does not form the pattern lattice, up to
    ``params.repair_swaps`` one-for-one exchanges of a selected and an
    unselected candidate are tried in increasing order of phi; the first
    subset that orders successfully is returned.
    """
    sel = select_grid(candidates, spec.M, params)
    c, r = _centers_radii(candidates)
    try:
        return order_grid_points(c[list(sel.indices)], spec, window_t_ref, sel.score, sel.indices)
    except DetectionFailure as first:
        for phi, subset in _swap_neighbours(c, r, sel, params.repair_swaps):
            try:
                return order_grid_points(c[list(subset)], spec, window_t_ref, phi, subset)
            except DetectionFailure:
                continue
        raise first


def _swap_neighbours(c: np.ndarray, r: np.ndarray, sel: SelectionResult, limit: int) -> list[tuple[float, tuple[int, ...]]]:
    if limit <= 0:
        return []
    chosen = set(sel.indices)
    pool = [j for j in range(len(c)) if j not in chosen and j not in set(sel.pruned)]
    out = []
    for i in sel.indices:
        for j in pool:
            subset = tuple(sorted((chosen - {i}) | {j}))
            out.append((joint_spread(c, r, subset), subset))
    out.sort()
    return out[:limit]


def write_candidates_csv(path, candidates: Sequence[Candidate], selected: Iterable[int], window: int = 0) -> None:
    """Debug dump: one row per candidate with its selection flag."""
    chosen = set(selected)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fh.tell() == 0:
            w.writerow(["window", "candidate", "cluster_id", "u", "v", "radius", "selected"])
        for j, cd in enumerate(candidates):
            w.writerow([window, j, cd.cluster_id, f"{cd.center[0]:.6f}", f"{cd.center[1]:.6f}", f"{cd.radius:.6f}", int(j in chosen)])
