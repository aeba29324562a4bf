"""Discrete k-median by swap local search, plus the group-weighted fair baseline."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import GroupedDataset
from .geo import InvalidInputError

log = logging.getLogger(__name__)

SUM = "sum"
FAIR = "fair"

# acceptance factor for a swap; keeps the search finite
SWAP_GAIN = 1.0 - 1e-6


def nominal_rho(p: int = 1) -> float:
    """Worst-case ratio of p-swap local search for metric k-median."""
    return 3.0 + 2.0 / p


@dataclass
class CenterSet:
    centers: np.ndarray
    k: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.int64)
        if len(np.unique(self.centers)) != len(self.centers):
            raise InvalidInputError("duplicate centers")


@dataclass
class Assignment:
    """Nearest-open-center assignment and its per-group costs."""

    center_of: np.ndarray
    distance: np.ndarray
    group_cost: np.ndarray
    group_weight: np.ndarray

    @property
    def group_average(self) -> np.ndarray:
        return self.group_cost / self.group_weight

    @property
    def fair_objective(self) -> float:
        return float(self.group_average.max())

    @property
    def total_cost(self) -> float:
        return float(self.group_cost.sum())


def assign(cost: np.ndarray, centers, weights=None, group_index=None, m: int | None = None) -> Assignment:
    """Assign each row of ``cost`` to its nearest column among ``centers`` (lowest index on ties)."""
    centers = np.asarray(centers, dtype=np.int64)
    if len(centers) == 0:
        raise InvalidInputError("no open centers")
    n = cost.shape[0]
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    group_index = np.zeros(n, dtype=np.int64) if group_index is None else np.asarray(group_index)
    m = int(group_index.max()) + 1 if m is None else m
    order = np.sort(centers)
    sub = cost[:, order]
    j = np.argmin(sub, axis=1)
    dist = sub[np.arange(n), j]
    return Assignment(
        center_of=order[j],
        distance=dist,
        group_cost=np.bincount(group_index, weights=weights * dist, minlength=m),
        group_weight=np.bincount(group_index, weights=weights, minlength=m),
    )


def objective_value(cost, centers, weights, group_index, m, objective: str) -> float:
    a = assign(cost, centers, weights, group_index, m)
    return a.fair_objective if objective == FAIR else a.total_cost


def exhaustive_best(cost, k, weights=None, group_index=None, m=None, objective: str = SUM):
    """Best ``k``-subset of facilities by brute force. Small instances only."""
    n, F = cost.shape
    if k > F:
        raise InvalidInputError("k exceeds the number of facilities")
    weights = np.ones(n) if weights is None else weights
    group_index = np.zeros(n, dtype=np.int64) if group_index is None else group_index
    m = int(group_index.max()) + 1 if m is None else m
    best_val, best = np.inf, None
    for combo in itertools.combinations(range(F), k):
        val = objective_value(cost, combo, weights, group_index, m, objective)
        if val < best_val:
            best_val, best = val, combo
    return best_val, np.array(best, dtype=np.int64)


@dataclass
class LocalSearchResult:
    centers: CenterSet
    assignment: Assignment
    value: float
    objective: str
    history: list[float] = field(default_factory=list)

    @property
    def swaps(self) -> int:
        return len(self.history) - 1


def _farthest_seed(cost, k, weights, rng) -> list[int]:
    n, F = cost.shape
    open_ = [int(rng.integers(F))]
    best = cost[:, open_[0]].copy()
    while len(open_) < k:
        u = int(np.argmax(weights * best))
        for f in np.argsort(cost[u], kind="stable"):
            if f not in open_:
                open_.append(int(f))
                break
        np.minimum(best, cost[:, open_[-1]], out=best)
    return open_


def _score(new_dist, weights, groups_mat, objective):
    # new_dist: (n, F) candidate distances; returns one value per column
    if objective == SUM:
        return weights @ new_dist
    return (groups_mat @ new_dist).max(axis=0)


def _swap_pass_single(cost, open_, weights, groups_mat, objective):
    """Best single swap. Returns ``(value, out_position, in_facility)``."""
    sub = cost[:, open_]
    if len(open_) > 1:
        part = np.argpartition(sub, 1, axis=1)
        rows = np.arange(len(cost))
        first = sub[rows, part[:, 0]]
        second = sub[rows, part[:, 1]]
        near_pos = part[:, 0]
    else:
        first = sub[:, 0]
        second = np.full(len(cost), np.inf)
        near_pos = np.zeros(len(cost), dtype=np.int64)
    closed = np.ones(cost.shape[1], dtype=bool)
    closed[open_] = False
    best = (np.inf, -1, -1)
    for pos in np.argsort(open_, kind="stable"):
        base = np.where(near_pos == pos, second, first)
        new_dist = np.minimum(base[:, None], cost)
        vals = np.where(closed, _score(new_dist, weights, groups_mat, objective), np.inf)
        f = int(np.argmin(vals))
        if vals[f] < best[0]:
            best = (float(vals[f]), int(pos), f)
    return best


def _swap_pass_multi(cost, open_, weights, group_index, m, objective, p):
    closed = [f for f in range(cost.shape[1]) if f not in open_]
    best = (np.inf, None, None)
    for outs in itertools.combinations(sorted(range(len(open_)), key=lambda i: open_[i]), p):
        for ins in itertools.combinations(closed, p):
            trial = [c for i, c in enumerate(open_) if i not in outs] + list(ins)
            val = objective_value(cost, trial, weights, group_index, m, objective)
            if val < best[0]:
                best = (val, outs, ins)
    return best


def local_search(cost: np.ndarray, k: int, weights=None, group_index=None, m: int | None = None,
                 objective: str = SUM, p: int = 1, seed: int = 0, init=None, max_swaps: int = 100_000
                 ) -> LocalSearchResult:
    """Swap local search over facility columns of ``cost``.

    ``objective`` is ``"sum"`` (weighted k-median) or ``"fair"`` (max over
    groups of the weighted average distance). A swap is taken only if it
    improves the objective by more than a ``1e-6`` relative margin; among all
    swaps the best one is taken, ties going to the lowest indices.
    """
    n, F = cost.shape
    if k < 1 or k > F:
        raise InvalidInputError(f"k={k} must be in [1, {F}]")
    if p < 1:
        raise InvalidInputError("swap budget p must be >= 1")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    group_index = np.zeros(n, dtype=np.int64) if group_index is None else np.asarray(group_index)
    m = int(group_index.max()) + 1 if m is None else m
    gw = np.bincount(group_index, weights=weights, minlength=m)
    groups_mat = np.zeros((m, n))
    groups_mat[group_index, np.arange(n)] = weights / gw[group_index]

    rng = np.random.default_rng(seed)
    if init is None:
        open_ = _farthest_seed(cost, k, weights, rng)
    else:
        open_ = [int(c) for c in init]
        if len(open_) != k or len(set(open_)) != k:
            raise InvalidInputError("init must hold k distinct facilities")
    value = objective_value(cost, open_, weights, group_index, m, objective)
    history = [value]
    while len(history) <= max_swaps and k < F and value > 0:
        if p == 1:
            cand, pos, f = _swap_pass_single(cost, open_, weights, groups_mat, objective)
            if cand < SWAP_GAIN * value:
                open_[pos] = f
        else:
            cand, outs, ins = _swap_pass_multi(cost, open_, weights, group_index, m, objective, min(p, k))
            if cand < SWAP_GAIN * value:
                open_ = [c for i, c in enumerate(open_) if i not in outs] + list(ins)
        if not cand < SWAP_GAIN * value:
            break
        # recompute rather than trust the incremental score
        value = objective_value(cost, open_, weights, group_index, m, objective)
        history.append(value)
    else:
        if len(history) > max_swaps:
            log.warning("local search stopped at the swap limit (%d)", max_swaps)
    centers = CenterSet(np.array(open_, dtype=np.int64), k)
    return LocalSearchResult(centers, assign(cost, open_, weights, group_index, m), value, objective, history)


def weighted_local_search_kmedian(dataset: GroupedDataset, k: int, weights=None, p: int = 1, seed: int = 0,
                                  objective: str = SUM, init=None, cost: np.ndarray | None = None
                                  ) -> LocalSearchResult:
    """Local search on a grouped dataset. ``weights`` default to the dataset's point weights."""
    if k > len(dataset.facilities):
        raise InvalidInputError(f"k={k} exceeds {len(dataset.facilities)} candidate facilities")
    cost = dataset.cost_matrix() if cost is None else cost
    w = dataset.weights if weights is None else np.asarray(weights, dtype=float)
    return local_search(cost, k, w, dataset.group_index, dataset.m, objective, p, seed, init)


def obs1_weights(dataset: GroupedDataset) -> np.ndarray:
    """Point weight divided by its group's total weight."""
    gw = dataset.group_weights()
    return dataset.weights / gw[dataset.group_index]


def obs1_fair_baseline(dataset: GroupedDataset, k: int, p: int = 1, seed: int = 0,
                       cost: np.ndarray | None = None) -> LocalSearchResult:
    """Run weighted k-median with every point of group i weighted by 1/|X_i|.

    The returned assignment reports the fair objective of the resulting
    centers; ``value`` is the weighted-sum objective the search minimised.
    """
    cost = dataset.cost_matrix() if cost is None else cost
    res = local_search(cost, k, obs1_weights(dataset), dataset.group_index, dataset.m, SUM, p, seed)
    # fair objective is measured with the dataset's own weights
    res.assignment = assign(cost, res.centers.centers, dataset.weights, dataset.group_index, dataset.m)
    return res


def kmed_approx(cost: np.ndarray, k: int, weights=None, p: int = 1, seed: int = 0) -> float:
    """K-median cost found by local search on one group's rows of the cost matrix."""
    n, F = cost.shape
    if n == 0:
        raise InvalidInputError("empty group")
    k = min(k, F)
    return local_search(cost, k, weights, p=p, seed=seed).value
