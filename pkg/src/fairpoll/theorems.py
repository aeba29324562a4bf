"""Quick regression checks on the adversarial and random instances, run by ``fairpoll theorems``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import baseline, dataset, fairlp, geo, rounding
from .balance import l_balanced_split


@dataclass
class Check:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


def random_grouped(rng, n: int, m: int, dim: int = 2) -> dataset.GroupedDataset:
    """Uniform points in the unit square with random groups (each group non-empty)."""
    pts = rng.random((n, dim))
    gi = np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    rng.shuffle(gi)
    return dataset.GroupedDataset(coords=pts, group_index=gi, labels=[f"G{g}" for g in range(m)],
                                  facilities=pts, metric=geo.euclidean(dim))


def gap_check(m: int = 5, D: float = 1.0) -> Check:
    ds = dataset.integrality_gap_instance(m, D)
    inst = fairlp.FairLpInstance.from_dataset(ds)
    sol, _ = fairlp.solve_fair_lp(inst)
    best, _ = baseline.exhaustive_best(inst.cost, ds.k, ds.weights, ds.group_index, ds.m, baseline.FAIR)
    ratio = best / sol.lam
    return Check(f"integrality gap m={m}", ratio >= m - 1e-6,
                 f"LP={sol.lam:.6g} integral={best:.6g} ratio={ratio:.6g}")


def filtering_check(instances: int = 20, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        ds = random_grouped(rng, int(rng.integers(8, 25)), int(rng.integers(1, 4)))
        k = int(rng.integers(1, 4))
        eps = float(rng.choice([0.25, 0.5]))
        inst = fairlp.FairLpInstance.from_dataset(ds, k)
        sol, _ = fairlp.solve_fair_lp(inst)
        res = rounding.filtering_round(inst, sol, eps)
        a = res.assignment
        bad += res.opened > math.floor(k / (1 - eps))
        bad += bool((a.distance > 2.0 * sol.R / eps).any())
        bad += bool((a.group_average > 2.0 * sol.lam / eps + 1e-6).any())
    return Check("filtering rounding bounds", bad == 0, f"{instances} instances, {bad} violations")


def split_check(instances: int = 20, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    met = geo.euclidean(2)
    for _ in range(instances):
        n = int(rng.integers(20, 120))
        k = int(rng.integers(1, 6))
        pts = rng.random((n, 2))
        centers = pts[rng.choice(n, k, replace=False)]
        near, _ = geo.nearest(pts, centers, met)
        L = max(math.ceil(n / k), int(np.bincount(near).max()) - 1)
        res = l_balanced_split(pts, met, centers, near, L)
        bad += bool((res.load > L).any()) + (res.n_centers > 2 * k)
        bad += bool((res.distance > 2.0 * res.original_distance).any())
    return Check("L-balanced split bounds", bad == 0, f"{instances} instances, {bad} violations")


def trap_check(t: int = 50, d: float = 1.0, eps: float = 0.01) -> Check:
    ds, lay = dataset.local_search_trap_instance(t, d, eps)
    cost = ds.cost_matrix()
    res = baseline.local_search(cost, 2, ds.weights, ds.group_index, ds.m, baseline.FAIR, init=[lay.a1, lay.b1])
    opt = baseline.objective_value(cost, [lay.A2[0], lay.B2[0]], ds.weights, ds.group_index, ds.m, baseline.FAIR)
    ratio = res.value / opt
    ok = res.swaps == 0 and ratio >= t / 2
    return Check(f"local-search trap t={t}", ok, f"swaps={res.swaps} ratio={ratio:.4g}")


def run_all() -> list[Check]:
    return [gap_check(), filtering_check(), split_check(), trap_check()]
