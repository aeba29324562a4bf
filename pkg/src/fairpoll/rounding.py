"""Turning fractional LP solutions into open facility sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import Assignment, assign, nominal_rho
from .fairlp import REL, FairLpInstance, FractionalSolution, effective_scales
from .geo import InvalidInputError

# fixed-point resolution of the dependent rounding; keeps every step exact in integers
PIPAGE_SCALE = 1 << 40


@dataclass
class FilteringResult:
    selected: np.ndarray   # points chosen by the filter, in selection order
    centers: np.ndarray    # facility opened for each selected point
    bound: np.ndarray      # per-point guarantee on the distance to the open set
    epsilon: float
    assignment: Assignment
    colocated: bool        # every selected point sits on the facility it opened

    @property
    def opened(self) -> int:
        return len(self.centers)


def filtering_round(inst: FairLpInstance, frac: FractionalSolution, epsilon: float) -> FilteringResult:
    """Greedy filtering by fractional connection cost.

    Repeatedly take the unfiltered point ``u`` with the smallest ``R_u``
    (lowest index on ties) and drop every unfiltered ``v`` with
    ``d(u, v) <= 2 R_v / epsilon``. Each taken point opens its nearest
    facility. When that facility is at distance 0 (facilities include the
    points) every point ends within ``2 R_v / epsilon`` of the open set; in
    general the bound gains the opening offset ``d(u, f_u)``.
    """
    if not 0 < epsilon < 1:
        raise InvalidInputError("epsilon must lie in (0, 1)")
    n = inst.n
    R = frac.R
    order = np.lexsort((np.arange(n), R))
    alive = np.ones(n, dtype=bool)
    bound = np.zeros(n)
    selected, centers = [], []
    for u in order:
        if not alive[u]:
            continue
        f_u = int(np.argmin(inst.cost[u]))
        offset = float(inst.cost[u, f_u])
        cand = np.flatnonzero(alive)
        d = inst.point_distances(u, cand)
        drop = cand[d <= 2.0 * R[cand] / epsilon]
        alive[drop] = False
        alive[u] = False
        bound[drop] = 2.0 * R[drop] / epsilon + offset
        bound[u] = offset
        selected.append(int(u))
        centers.append(f_u)
    centers_arr = np.array(centers, dtype=np.int64)
    a = assign(inst.cost, np.unique(centers_arr), inst.weights, inst.group_index, inst.m)
    colocated = all(inst.cost[u, f] == 0 for u, f in zip(selected, centers))
    return FilteringResult(np.array(selected, dtype=np.int64), centers_arr, bound, epsilon, a, colocated)


@dataclass
class RelErrorRound:
    filtering: FilteringResult
    lam_certified: float
    lhs: np.ndarray        # per group: sum of weighted distances to the open set
    rhs: np.ndarray        # per group: (2/eps) * lambda * scale
    eta: float
    rho_nominal: float

    @property
    def certified(self) -> bool:
        return bool((self.lhs <= self.rhs).all())

    @property
    def implied_factor(self) -> float:
        return self.eta * self.rho_nominal


def relerror_round(inst: FairLpInstance, frac: FractionalSolution, epsilon: float,
                   rho_nominal: float | None = None, scales=None) -> RelErrorRound:
    """Filtering rounding of a relative-error LP solution with a per-group certificate.

    ``lambda`` is certified from the solution itself, as the larger of the
    solver's objective and ``max_i sum_{u in X_i} w_u R_u / scale_i``, so the
    audit does not depend on solver tolerances. Zero scales are floored as
    in the LP.
    """
    if inst.mode != REL:
        raise InvalidInputError("relerror_round needs a relative-error instance")
    scales = effective_scales(inst) if scales is None else np.asarray(scales, dtype=float)
    res = filtering_round(inst, frac, epsilon)
    gsum = np.bincount(inst.group_index, weights=inst.weights * frac.R, minlength=inst.m)
    pos = scales > 0
    lam = max(frac.lam, float((gsum[pos] / scales[pos]).max(initial=0.0)))
    eta = 2.0 / epsilon
    lhs = res.assignment.group_cost
    rhs = eta * lam * scales
    return RelErrorRound(res, lam, lhs, rhs, eta, nominal_rho() if rho_nominal is None else rho_nominal)


# ------------------------------------------------------- dependent rounding


def integerize(y, k: int, tol: float = 1e-6) -> np.ndarray:
    """Fixed-point copy of ``y`` in ``[0, PIPAGE_SCALE]`` summing to exactly ``k * PIPAGE_SCALE``.

    A deficit is spread over entries with room, in proportion to that room.
    """
    y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
    if y.sum() > k + tol:
        raise InvalidInputError(f"sum of y = {y.sum():.9g} exceeds k = {k}")
    if k > len(y):
        raise InvalidInputError("k exceeds the number of facilities")
    Q = PIPAGE_SCALE
    yi = np.array([int(round(v * Q)) for v in y], dtype=object)
    target = k * Q
    diff = target - int(yi.sum())
    if diff != 0:
        room = np.array([Q - v for v in yi], dtype=object) if diff > 0 else yi.copy()
        total = int(room.sum())
        share = [int(r) * abs(diff) // total for r in room]
        left = abs(diff) - sum(share)
        for i in np.argsort([-int(r) for r in room], kind="stable"):
            if left == 0:
                break
            if share[i] < room[i]:
                share[i] += 1
                left -= 1
        sign = 1 if diff > 0 else -1
        yi = np.array([int(v) + sign * s for v, s in zip(yi, share)], dtype=object)
    return yi


def pipage(y_int, rng, trace: list | None = None) -> np.ndarray:
    """Pairwise dependent rounding of a fixed-point vector.

    Each step takes the two lowest-indexed fractional entries and moves mass
    between them until one is integral, preserving their sum exactly and each
    entry's expectation. Returns the indices that end at 1.
    """
    Q = PIPAGE_SCALE
    y = [int(v) for v in y_int]
    frac = [i for i, v in enumerate(y) if v % Q]
    while len(frac) >= 2:
        i, j = frac[0], frac[1]
        a = min(Q - y[i], y[j])
        b = min(y[i], Q - y[j])
        if rng.random() * (a + b) < b:
            y[i] += a
            y[j] -= a
        else:
            y[i] -= b
            y[j] += b
        frac = [t for t in frac if y[t] % Q]
        if trace is not None:
            trace.append(sum(y))
    if frac:
        # only reachable when the total is not a whole number of facilities
        i = frac[0]
        y[i] = Q if rng.random() * Q < y[i] else 0
    return np.array([i for i, v in enumerate(y) if v == Q], dtype=np.int64)


@dataclass
class DependentRoundingResult:
    centers: np.ndarray
    point_cost: np.ndarray
    group_average: np.ndarray
    trial: int
    seed: list

    @property
    def fair_objective(self) -> float:
        return float(self.group_average.max())


@dataclass
class DependentSummary:
    trials: list[DependentRoundingResult]
    group_mean: np.ndarray
    group_stderr: np.ndarray
    open_frequency: np.ndarray

    def confidence_interval(self, z: float = 1.96) -> tuple[np.ndarray, np.ndarray]:
        return self.group_mean - z * self.group_stderr, self.group_mean + z * self.group_stderr

    def best(self) -> DependentRoundingResult:
        return min(self.trials, key=lambda t: (t.fair_objective, t.trial))


def dependent_round(inst: FairLpInstance, frac: FractionalSolution, k: int, trials: int, seed: int
                    ) -> DependentSummary:
    """Open exactly ``k`` facilities per trial by dependent rounding of ``y``.

    Points then go to their nearest open facility; the LP's ``z`` is not used.
    Trial ``t`` draws from the seed ``[seed, t]``.
    """
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    yi = integerize(frac.y, k)
    out = []
    freq = np.zeros(inst.n_facilities)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        opened = pipage(yi, rng)
        a = assign(inst.cost, opened, inst.weights, inst.group_index, inst.m)
        freq[opened] += 1
        out.append(DependentRoundingResult(opened, a.distance, a.group_average, t, [seed, t]))
    ga = np.array([r.group_average for r in out])
    se = ga.std(axis=0, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros(inst.m)
    return DependentSummary(out, ga.mean(axis=0), se, freq / trials)
