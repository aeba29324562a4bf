"""Per-group k-median coresets by bicriteria seeding and sensitivity sampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geo
from .dataset import GroupedDataset
from .geo import InvalidInputError, Metric


@dataclass
class BicriteriaSolution:
    centers: np.ndarray   # indices into the input points
    nearest: np.ndarray   # position in ``centers`` of each point's nearest center
    distance: np.ndarray  # distance of each point to that center

    def cost(self, weights=None) -> float:
        return float(self.distance.sum() if weights is None else weights @ self.distance)


def bicriteria_seed(points, metric: Metric, k: int, seed, weights=None, per_round: int | None = None
                    ) -> BicriteriaSolution:
    """Sample-and-prune seeding that opens O(k log n) centers.

    Each round samples ``per_round`` (default ``3k``) centers from the points
    still unserved, marks the half of them closest to all centers so far as
    served, and continues with the farther half.
    """
    pts = geo.as_points(points, metric)
    n = len(pts)
    if n == 0:
        raise InvalidInputError("no points")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if n <= k:
        return BicriteriaSolution(np.arange(n), np.arange(n), np.zeros(n))
    rng = np.random.default_rng(seed)
    per_round = per_round or 3 * k
    remaining = np.arange(n)
    best = np.full(n, np.inf)
    centers: list[int] = []
    for _ in range(math.ceil(math.log2(n / k))):
        if len(remaining) <= per_round:
            break
        pw = w[remaining]
        pick = rng.choice(remaining, size=per_round, replace=False, p=pw / pw.sum())
        centers.extend(int(i) for i in pick)
        d_new = geo.pairwise_cost(pts[remaining], pts[pick], metric).min(axis=1)
        np.minimum(best[remaining], d_new, out=d_new)
        best[remaining] = d_new
        order = np.argsort(d_new, kind="stable")
        remaining = remaining[np.sort(order[len(order) // 2:])]
    centers.extend(int(i) for i in remaining if i not in set(centers))
    centers_arr = np.array(sorted(set(centers)), dtype=np.int64)
    nearest, dist = geo.nearest(pts, pts[centers_arr], metric)
    return BicriteriaSolution(centers_arr, nearest, dist)


@dataclass
class Coreset:
    coords: np.ndarray
    weights: np.ndarray
    group_index: np.ndarray
    source: np.ndarray          # index of each coreset point in the source dataset
    labels: list[str]
    metric: Metric
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.coords)

    def group_weights(self) -> np.ndarray:
        return np.bincount(self.group_index, weights=self.weights, minlength=self.m)

    def as_dataset(self, facilities, k: int | None = None) -> GroupedDataset:
        return GroupedDataset(coords=self.coords, group_index=self.group_index, labels=list(self.labels),
                              facilities=facilities, metric=self.metric, weights=self.weights, k=k)


def target_size(n: int, k: int, epsilon: float, delta: float, c: float = 10.0) -> int:
    return math.ceil(c / epsilon ** 2 * (k * math.log(n) + math.log(1.0 / delta)))


def _check_params(epsilon, delta):
    if not 0 < epsilon < 1:
        raise InvalidInputError(f"epsilon={epsilon} must lie in (0, 1)")
    if not 0 < delta < 1:
        raise InvalidInputError(f"delta={delta} must lie in (0, 1)")


def sample_group(points, metric: Metric, k: int, size: int, seed, weights=None):
    """Sensitivity-sample ``size`` draws; returns ``(indices, weights)`` into ``points``.

    Total weight of every bicriteria cluster is preserved exactly: the cluster
    center takes the residual weight when it is positive, otherwise the
    cluster's sampled weights are rescaled to the cluster total.
    """
    pts = geo.as_points(points, metric)
    n = len(pts)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    bic = bicriteria_seed(pts, metric, k, rng)
    ncl = len(bic.centers)
    cl_cost = np.bincount(bic.nearest, weights=w * bic.distance, minlength=ncl)
    cl_weight = np.bincount(bic.nearest, weights=w, minlength=ncl)
    cc = cl_cost[bic.nearest]
    sens = np.where(cc > 0, w * bic.distance / np.where(cc > 0, cc, 1.0), 0.0) + w / cl_weight[bic.nearest]
    prob = sens / sens.sum()
    draws = rng.choice(n, size=size, replace=True, p=prob)
    out = np.zeros(n)
    np.add.at(out, draws, w[draws] / (size * prob[draws]))

    sampled_w = np.bincount(bic.nearest, weights=out, minlength=ncl)
    residual = cl_weight - sampled_w
    for j in range(ncl):
        if residual[j] > 1e-12 * cl_weight[j]:
            out[bic.centers[j]] += residual[j]
        elif residual[j] < 0:
            members = bic.nearest == j
            out[members] *= cl_weight[j] / sampled_w[j]
    idx = np.flatnonzero(out > 0)
    return idx, out[idx]


def fl_coreset(points, metric: Metric, k: int, epsilon: float, delta: float, seed, c: float = 10.0,
               weights=None, size: int | None = None, max_size: int | None = None) -> Coreset:
    """(k, epsilon)-coreset of one point set.

    The draw count is ``ceil(c / epsilon^2 * (k ln n + ln(1/delta)))`` unless
    ``size`` overrides it; ``max_size`` caps it. When the draw count reaches
    ``n`` the input itself is returned with its own weights.
    """
    _check_params(epsilon, delta)
    pts = geo.as_points(points, metric)
    n = len(pts)
    if n == 0:
        raise InvalidInputError("no points")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    draws = size if size is not None else target_size(n, k, epsilon, delta, c)
    if max_size is not None:
        draws = min(draws, max_size)
    prov = {"epsilon": epsilon, "delta": delta, "k": k, "c": c, "draws": int(draws),
            "source_sizes": [int(n)], "seed": seed if isinstance(seed, int) else None}
    if draws >= n:
        idx, cw = np.arange(n), w.copy()
        prov["exact"] = True
    else:
        idx, cw = sample_group(pts, metric, k, draws, seed, w)
        prov["exact"] = False
    return Coreset(pts[idx], cw, np.zeros(len(idx), dtype=np.int64), idx, ["all"], metric, prov)


def grouped_coreset(dataset: GroupedDataset, k: int, epsilon: float, delta: float, seed: int,
                    c: float = 10.0, size: int | None = None, max_size: int | None = None) -> Coreset:
    """Union of per-group coresets; group ``g`` uses the seed ``[seed, g]``."""
    _check_params(epsilon, delta)
    coords, weights, groups, source, exact, draws = [], [], [], [], [], []
    for g in range(dataset.m):
        members = dataset.members(g)
        if len(members) == 0:
            continue
        part = fl_coreset(dataset.coords[members], dataset.metric, k, epsilon, delta,
                          seed=[seed, g], c=c, weights=dataset.weights[members], size=size, max_size=max_size)
        coords.append(part.coords)
        weights.append(part.weights)
        groups.append(np.full(len(part), g, dtype=np.int64))
        source.append(members[part.source])
        exact.append(part.provenance["exact"])
        draws.append(part.provenance["draws"])
    prov = {
        "epsilon": epsilon, "delta": delta, "k": k, "c": c, "seed": seed,
        "source_sizes": [int(len(dataset.members(g))) for g in range(dataset.m)],
        "coreset_sizes": [int(len(x)) for x in source],
        "draws": draws, "exact": exact,
    }
    return Coreset(np.vstack(coords), np.concatenate(weights), np.concatenate(groups), np.concatenate(source),
                   list(dataset.labels), dataset.metric, prov)


def group_costs(coords, weights, group_index, m: int, centers, metric: Metric) -> np.ndarray:
    """Weighted sum of distances to the nearest of ``centers``, per group."""
    _, dist = geo.nearest(coords, centers, metric)
    return np.bincount(group_index, weights=weights * dist, minlength=m)


def fair_cost(coords, weights, group_index, m: int, centers, metric: Metric) -> float:
    """Maximum over groups of the weighted average distance to ``centers``."""
    gw = np.bincount(group_index, weights=weights, minlength=m)
    return float((group_costs(coords, weights, group_index, m, centers, metric) / gw).max())


def relative_deviations(coreset: Coreset, dataset: GroupedDataset, center_sets) -> np.ndarray:
    """``|fair(S) - fair(X)| / fair(X)`` for each center set (given as coordinates)."""
    out = []
    for C in center_sets:
        full = fair_cost(dataset.coords, dataset.weights, dataset.group_index, dataset.m, C, dataset.metric)
        core = fair_cost(coreset.coords, coreset.weights, coreset.group_index, coreset.m, C, coreset.metric)
        out.append(abs(core - full) / full if full > 0 else abs(core - full))
    return np.array(out)


def certify(coreset: Coreset, dataset: GroupedDataset, n_sets: int = 50, seed: int = 0, k: int | None = None
            ) -> float:
    """Record the worst observed fair-cost deviation over random center sets in the provenance."""
    rng = np.random.default_rng(seed)
    k = k or coreset.provenance.get("k", 1)
    sets = [dataset.facilities[rng.choice(len(dataset.facilities), size=min(k, len(dataset.facilities)),
                                          replace=False)] for _ in range(n_sets)]
    dev = relative_deviations(coreset, dataset, sets)
    coreset.provenance["eps_observed"] = float(dev.max())
    coreset.provenance["certified_sets"] = n_sets
    return float(dev.max())


def write_coreset(coreset: Coreset, path) -> None:
    dim = coreset.coords.shape[1]
    names = ["lat", "lon"] if coreset.metric.kind == geo.HAVERSINE else [f"x{i}" for i in range(dim)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "weight", "group", "source"])
        for row, wt, g, s in zip(coreset.coords, coreset.weights, coreset.group_index, coreset.source):
            w.writerow([*(repr(float(x)) for x in row), repr(float(wt)), coreset.labels[g], int(s)])


def read_coreset(path, metric: Metric, labels: list[str] | None = None) -> Coreset:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 3
    coords = np.array([[float(x) for x in r[:dim]] for r in body]).reshape(-1, dim)
    weights = np.array([float(r[dim]) for r in body])
    glabels = [r[dim + 1] for r in body]
    labels = labels or sorted(set(glabels))
    pos = {g: i for i, g in enumerate(labels)}
    return Coreset(coords, weights, np.array([pos[g] for g in glabels], dtype=np.int64),
                   np.array([int(r[dim + 2]) for r in body], dtype=np.int64), labels, metric)
