"""Capacity-aware variants: splitting over-full k-median clusters, and
weighted / capacitated k-center."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import maximum_flow

from . import geo
from .geo import InvalidInputError, Metric

CAPACITY_PRESETS = (0.1, 0.5, 0.9)


def derived_capacity(eps_cap: float, total: float, n_sites: int) -> int:
    """``ceil((1 + eps_cap) * total / n_sites)``: the per-site cap used by the sweep."""
    if n_sites < 1 or total <= 0:
        raise InvalidInputError("derived capacity needs positive totals and site count")
    return max(1, math.ceil((1.0 + eps_cap) * total / n_sites))


@dataclass
class BalancedResult:
    center_coords: np.ndarray
    center_source: list[tuple[str, int]]   # ("facility" | "point", index)
    assignment: np.ndarray                 # center position of each point
    distance: np.ndarray                   # distance of each point to its center
    load: np.ndarray                       # assigned weight per center
    k_original: int
    L: float | None
    original_distance: np.ndarray | None = None
    overflow: list[int] = field(default_factory=list)

    @property
    def n_centers(self) -> int:
        return len(self.center_coords)

    @property
    def extra_sites(self) -> int:
        return self.n_centers - self.k_original

    @property
    def load_mean(self) -> float:
        return float(self.load.mean())

    @property
    def load_std(self) -> float:
        return float(self.load.std())


def l_balanced_split(points, metric: Metric, center_coords, assignment, L: float, weights=None,
                     center_source=None) -> BalancedResult:
    """Split every cluster holding more than ``L`` weight.

    A cluster around ``u`` with mass ``N > L`` is replaced by the
    ``ceil(N / L)`` member points closest to ``u`` (ties by index). Those
    points serve themselves; the rest of the cluster, in ascending distance to
    ``u``, joins its nearest new center that still has room. Every new center
    is at least as close to ``u`` as any point it serves, so no point's
    distance more than doubles.
    """
    if L < 1:
        raise InvalidInputError("capacity L must be >= 1")
    pts = geo.as_points(points, metric)
    cc = geo.as_points(center_coords, metric)
    assignment = np.asarray(assignment, dtype=np.int64)
    n = len(pts)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    k0 = len(cc)
    source = list(center_source) if center_source is not None else [("facility", j) for j in range(k0)]
    orig_d = geo.paired_distance(pts, cc[assignment], metric)

    new_coords, new_source = [], []
    new_assign = np.empty(n, dtype=np.int64)
    overflow: list[int] = []
    for j in range(k0):
        members = np.flatnonzero(assignment == j)
        mass = w[members].sum()
        if mass <= L:
            pos = len(new_coords)
            new_coords.append(cc[j])
            new_source.append(source[j])
            new_assign[members] = pos
            continue
        n_new = math.ceil(mass / L)
        rank = members[np.lexsort((members, orig_d[members]))]
        heads = rank[:n_new]
        base = len(new_coords)
        for h in heads:
            new_coords.append(pts[h])
            new_source.append(("point", int(h)))
        room = np.full(n_new, float(L))
        room -= w[heads]
        new_assign[heads] = base + np.arange(n_new)
        rest = rank[n_new:]
        if len(rest):
            d_rest = geo.pairwise_cost(pts[rest], pts[heads], metric)
            for row, v in enumerate(rest):
                order = np.argsort(d_rest[row], kind="stable")
                fits = [c for c in order if room[c] >= w[v]]
                c = fits[0] if fits else int(np.argmax(room))
                if not fits:
                    overflow.append(base + c)
                room[c] -= w[v]
                new_assign[v] = base + c
    coords = np.array(new_coords)
    dist = geo.paired_distance(pts, coords[new_assign], metric)
    load = np.bincount(new_assign, weights=w, minlength=len(coords))
    return BalancedResult(coords, new_source, new_assign, dist, load, k0, L, orig_d, sorted(set(overflow)))


# ------------------------------------------------------------------ k-center


@dataclass
class GonzalezResult:
    centers: np.ndarray
    nearest: np.ndarray
    distance: np.ndarray

    @property
    def radius(self) -> float:
        return float(self.distance.max())


def gonzalez_kcenter(points, metric: Metric, k: int, seed: int = 0) -> GonzalezResult:
    """Farthest-first traversal from a seeded random start (ties to the lowest index)."""
    pts = geo.as_points(points, metric)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidInputError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    best = geo.pairwise_cost(pts, pts[centers], metric)[:, 0]
    nearest = np.zeros(n, dtype=np.int64)
    while len(centers) < k:
        nxt = int(np.argmax(best))
        d = geo.pairwise_cost(pts, pts[nxt:nxt + 1], metric)[:, 0]
        closer = d < best
        nearest[closer] = len(centers)
        best = np.where(closer, d, best)
        centers.append(nxt)
    best[centers] = 0.0
    nearest[centers] = np.arange(len(centers))
    return GonzalezResult(np.array(centers, dtype=np.int64), nearest, best)


@dataclass
class KCenterCoreset:
    coords: np.ndarray
    weights: np.ndarray
    source: np.ndarray      # index of each coreset point in the input
    member_of: np.ndarray   # coreset position representing each input point
    radius: float           # max distance of an input point to its representative


def kcenter_coreset(points, metric: Metric, k: int, chunks: int, seed: int, per_chunk: int | None = None,
                    weights=None) -> KCenterCoreset:
    """Shuffle into ``chunks`` pieces, run Gonzalez on each, weight centers by what they cover."""
    if chunks < 1:
        raise InvalidInputError("chunks must be >= 1")
    pts = geo.as_points(points, metric)
    n = len(pts)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    per_chunk = per_chunk or k
    coords, cw, src = [], [], []
    member_of = np.empty(n, dtype=np.int64)
    radius = 0.0
    for ci, part in enumerate(np.array_split(perm, chunks)):
        if len(part) == 0:
            continue
        part = np.sort(part)
        g = gonzalez_kcenter(pts[part], metric, min(per_chunk, len(part)), seed=int(rng.integers(2**31)))
        base = len(src)
        src.extend(part[g.centers].tolist())
        coords.append(pts[part[g.centers]])
        cw.append(np.bincount(g.nearest, weights=w[part], minlength=len(g.centers)))
        member_of[part] = base + g.nearest
        radius = max(radius, g.radius)
    return KCenterCoreset(np.vstack(coords), np.concatenate(cw), np.array(src, dtype=np.int64), member_of, radius)


@dataclass
class CapacitatedResult:
    centers: np.ndarray       # indices into the input points
    assignment: np.ndarray    # position in ``centers`` of each point
    distance: np.ndarray
    load: np.ndarray
    threshold: float          # the graph threshold r at which the test passed
    threshold_index: int
    L: float | None
    flagged: list[int] = field(default_factory=list)  # indivisible points heavier than L

    @property
    def radius(self) -> float:
        return float(self.distance.max())


def _monarchs(dmat: np.ndarray, order: np.ndarray, r: float) -> list[int]:
    chosen: list[int] = []
    covered = np.zeros(len(dmat), dtype=bool)
    for i in order:
        if covered[i]:
            continue
        chosen.append(int(i))
        covered |= dmat[i] <= 2.0 * r
    return chosen


def _route(dmat, w_int, open_, reach, L):
    """Max-flow of point mass into open centers within ``reach`` under capacity ``L``."""
    n = len(dmat)
    kk = len(open_)
    src, sink = n + kk, n + kk + 1
    pi, cj = np.nonzero(dmat[:, open_] <= reach)
    rows = np.concatenate([np.full(n, src), pi, n + np.arange(kk)])
    cols = np.concatenate([np.arange(n), n + cj, np.full(kk, sink)])
    caps = np.concatenate([w_int, w_int[pi], np.full(kk, L)]).astype(np.int32)
    g = sp.csr_matrix((caps, (rows, cols)), shape=(n + kk + 2, n + kk + 2))
    res = maximum_flow(g, src, sink)
    flow = res.flow.tocsr()
    pc = np.asarray(flow[pi, n + cj]).ravel()
    share = sp.csr_matrix((pc, (pi, cj)), shape=(n, kk)).toarray()
    return res.flow_value, share


def _largest_share(dmat, w_int, open_, reach, L, share):
    """Give each point wholly to its largest share, then move points off overfull centers."""
    n, kk = share.shape
    assign = np.argmax(share, axis=1)
    load = np.bincount(assign, weights=w_int, minlength=kk)
    ok = dmat[:, open_] <= reach
    for c in np.argsort(-load, kind="stable"):
        if load[c] <= L:
            continue
        movers = np.flatnonzero(assign == c)
        for v in movers[np.argsort(w_int[movers], kind="stable")]:
            if load[c] <= L:
                break
            targets = [t for t in np.argsort(dmat[v, open_], kind="stable")
                       if t != c and ok[v, t] and load[t] + w_int[v] <= L]
            if targets:
                t = targets[0]
                assign[v] = t
                load[c] -= w_int[v]
                load[t] += w_int[v]
        if load[c] > L:
            return None
    return assign


def _best_fit(dmat, w_int, open_, reach, L, fixed=None):
    """Best-fit decreasing within reach; ``fixed`` maps points to centers placed beforehand."""
    n = len(dmat)
    kk = len(open_)
    assign = np.full(n, -1, dtype=np.int64)
    load = np.zeros(kk)
    if fixed is not None:
        for v, c in fixed.items():
            assign[v] = c
            load[c] += w_int[v]
    ok = dmat[:, open_] <= reach
    rest = np.flatnonzero(assign < 0)
    for v in rest[np.lexsort((rest, -w_int[rest]))]:
        fits = np.flatnonzero(ok[v] & (load + w_int[v] <= L))
        if len(fits) == 0:
            return None
        # fullest center that still fits, nearest on ties
        c = fits[np.lexsort((dmat[v, np.asarray(open_)[fits]], -load[fits]))[0]]
        assign[v] = c
        load[c] += w_int[v]
    return assign


def _integral_repair(dmat, w_int, open_, reach, L, share):
    """Integral assignment from a fractional routing, trying increasingly global repairs."""
    assign = _largest_share(dmat, w_int, open_, reach, L, share)
    if assign is not None:
        return assign
    whole = np.isclose(share.max(axis=1), w_int) & (w_int > 0)
    fixed = {int(v): int(np.argmax(share[v])) for v in np.flatnonzero(whole)}
    assign = _best_fit(dmat, w_int, open_, reach, L, fixed)
    if assign is not None:
        return assign
    return _best_fit(dmat, w_int, open_, reach, L)


def capacitated_feasibility(dmat: np.ndarray, weights, k: int, L: float | None, r: float, hop: float = 3.0):
    """Try to open ``k`` centers serving every point within ``hop * r`` under capacity ``L``.

    Centers start as a maximal set of points pairwise more than ``2r`` apart
    (heaviest first); more than ``k`` of them proves no solution of radius
    ``r`` exists. Further centers go where unrouted mass is densest. Returns
    ``(centers, assignment)`` or ``None``.
    """
    n = len(dmat)
    w = np.asarray(weights, dtype=float)
    order = np.lexsort((np.arange(n), -w))
    open_ = _monarchs(dmat, order, r)
    if len(open_) > k:
        return None
    if L is None:
        sub = dmat[:, open_]
        return open_, np.argmin(sub, axis=1)
    w_int = np.rint(w).astype(np.int64)
    heavy = w_int > L
    cap_w = np.where(heavy, 0, w_int)
    reach = hop * r
    need = int(cap_w.sum())
    while True:
        near = np.argmin(dmat[:, open_], axis=1)
        if (np.bincount(near, weights=cap_w, minlength=len(open_)) <= L).all():
            return open_, near
        value, share = _route(dmat, cap_w, open_, reach, int(L))
        if value == need:
            assign = _integral_repair(dmat, cap_w, open_, reach, L, share)
            if assign is not None:
                if heavy.any():
                    assign[heavy] = np.argmin(dmat[np.ix_(np.flatnonzero(heavy), open_)], axis=1)
                return open_, assign
        if len(open_) >= k:
            return None
        unrouted = cap_w - share.sum(axis=1)
        if value == need:
            # flow was complete but packing failed: add room where the heaviest points sit
            unrouted = cap_w.astype(float)
        score = (dmat <= r) @ unrouted
        score[open_] = -1
        if score.max() <= 0:
            cand = np.argsort(-unrouted, kind="stable")
            nxt = next(int(i) for i in cand if i not in open_)
        else:
            nxt = int(np.argmax(score))
        open_.append(nxt)


def capacitated_kcenter(points, metric: Metric, k: int, L: float | None, weights=None, hop: float = 3.0
                        ) -> CapacitatedResult:
    """Smallest pairwise-distance threshold at which :func:`capacitated_feasibility` succeeds.

    Binary search over the sorted distinct pairwise distances. The returned
    threshold passes the test and the next smaller one fails it. ``L=None``
    means uncapacitated.
    """
    pts = geo.as_points(points, metric)
    n = len(pts)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if L is not None and k * L < w.sum():
        raise InvalidInputError(f"capacity too small: k*L = {k * L} < total weight {w.sum()}")
    dmat = geo.pairwise_cost(pts, pts, metric)
    thr = np.unique(dmat)

    def test(i):
        return capacitated_feasibility(dmat, w, k, L, float(thr[i]), hop)

    hi = len(thr) - 1
    best = test(hi)
    if best is None:
        raise InvalidInputError("infeasible even at the largest radius (capacity too small)")
    lo = -1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        got = test(mid)
        if got is None:
            lo = mid
        else:
            hi, best = mid, got
    open_, assign = best
    centers = np.array(open_, dtype=np.int64)
    dist = dmat[np.arange(n), centers[assign]]
    load = np.bincount(assign, weights=w, minlength=len(centers))
    flagged = np.flatnonzero(w > L).tolist() if L is not None else []
    return CapacitatedResult(centers, assign, dist, load, float(thr[hi]), hi, L, flagged)


# -------------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    eps_cap: float
    L: int
    extra_sites: int
    mean_load: float
    std_load: float
    kcenter_mean_load: float | None = None
    kcenter_std_load: float | None = None
    kcenter_radius: float | None = None
    split_audit_ok: bool = True


def capacity_sweep(points, metric: Metric, center_coords, assignment, n_sites: int, eps_caps=CAPACITY_PRESETS,
                   kcenter: KCenterCoreset | None = None, k: int | None = None,
                   center_source=None) -> list[SweepRow]:
    """Split the fixed unconstrained solution (and, given a coreset, run
    capacitated k-center) at ``L = ceil((1 + eps) * n / n_sites)`` per ``eps``."""
    pts = geo.as_points(points, metric)
    rows = []
    for eps in sorted(eps_caps):
        L = derived_capacity(eps, len(pts), n_sites)
        res = l_balanced_split(pts, metric, center_coords, assignment, L, center_source=center_source)
        ok = bool((res.load <= L).all() and (res.distance <= 2.0 * res.original_distance).all())
        row = SweepRow(eps, L, res.extra_sites, res.load_mean, res.load_std, split_audit_ok=ok)
        if kcenter is not None:
            kc = capacitated_kcenter(kcenter.coords, metric, k or n_sites, L, weights=kcenter.weights)
            load = kc.load
            if len(load) < (k or n_sites):
                load = np.concatenate([load, np.zeros((k or n_sites) - len(load))])
            row.kcenter_mean_load = float(load.mean())
            row.kcenter_std_load = float(load.std())
            row.kcenter_radius = kc.radius
        rows.append(row)
    return rows
