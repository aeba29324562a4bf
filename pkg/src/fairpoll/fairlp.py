"""Fair k-median LP relaxations (absolute and relative group error) and their solution.

Variable order: ``y`` for every facility, then one ``z`` per supported
(point, facility) pair in row-major order, then ``lambda`` last.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import geo
from .dataset import GroupedDataset
from .geo import InvalidInputError, Metric

log = logging.getLogger(__name__)

ABS = "abs"
REL = "rel"

DEFAULT_NEIGHBORS = 50
# a group whose scale is 0 has its scale replaced by this fraction of the mean positive distance
REL_FLOOR_FACTOR = 1e-6


@dataclass
class FairLpInstance:
    """Everything needed to write down the LP.

    ``cost`` is the point-to-facility distance matrix (squared distances for
    the k-means variant). ``scales`` are the per-group K-Med-Approx values and
    are only used in ``REL`` mode.
    """

    cost: np.ndarray
    group_index: np.ndarray
    k: float
    m: int
    weights: np.ndarray | None = None
    mode: str = ABS
    scales: np.ndarray | None = None
    labels: list[str] | None = None
    # point geometry, needed only by rounding (point-to-point distances)
    point_cost: np.ndarray | None = None
    coords: np.ndarray | None = None
    metric: Metric | None = None

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float)
        n, F = self.cost.shape
        self.group_index = np.asarray(self.group_index, dtype=np.int64)
        self.weights = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if self.mode not in (ABS, REL):
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.mode == REL:
            if self.scales is None or len(self.scales) != self.m:
                raise InvalidInputError("relative mode needs one scale per group")
            self.scales = np.asarray(self.scales, dtype=float)
            if (self.scales < 0).any():
                raise InvalidInputError("group scales must be >= 0")

    @classmethod
    def from_dataset(cls, ds: GroupedDataset, k: float | None = None, mode: str = ABS, scales=None,
                     cost: np.ndarray | None = None) -> "FairLpInstance":
        k = ds.k if k is None else k
        if k is None:
            raise InvalidInputError("k not given and dataset carries none")
        return cls(cost=ds.cost_matrix() if cost is None else cost, group_index=ds.group_index, k=k, m=ds.m,
                   weights=ds.weights, mode=mode, scales=scales, labels=list(ds.labels),
                   coords=ds.coords, metric=ds.metric)

    @property
    def n(self) -> int:
        return self.cost.shape[0]

    @property
    def n_facilities(self) -> int:
        return self.cost.shape[1]

    def group_weights(self) -> np.ndarray:
        return np.bincount(self.group_index, weights=self.weights, minlength=self.m)

    def point_distances(self, u: int, among: np.ndarray) -> np.ndarray:
        """Distances from point ``u`` to the points ``among``."""
        if self.point_cost is not None:
            return self.point_cost[u, among]
        if self.coords is None or self.metric is None:
            raise InvalidInputError("instance carries no point geometry")
        return geo.pairwise_cost(self.coords[u:u + 1], self.coords[among], self.metric)[0]


@dataclass
class LinearProgram:
    """``min c.x`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``lo <= x <= hi``."""

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_fac: int
    z_point: np.ndarray
    z_fac: np.ndarray
    flags: dict = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return len(self.c)

    @property
    def lam_col(self) -> int:
        return self.n_vars - 1

    @property
    def nnz(self) -> int:
        return int(self.A_eq.nnz + self.A_ub.nnz)


@dataclass
class FractionalSolution:
    lam: float
    y: np.ndarray
    z: sp.csr_matrix
    R: np.ndarray
    converged: bool = True
    status: str = "optimal"
    method: str = "highs"
    neighbors: int | None = None


def nearest_support(cost: np.ndarray, T: int | None) -> tuple[np.ndarray, np.ndarray]:
    """(point, facility) pairs for each point's ``T`` nearest facilities, row-major."""
    n, F = cost.shape
    if T is None or T >= F:
        return np.repeat(np.arange(n), F), np.tile(np.arange(F), n)
    near = np.argsort(cost, axis=1, kind="stable")[:, :T]
    near.sort(axis=1)
    return np.repeat(np.arange(n), T), near.ravel()


def effective_scales(inst: FairLpInstance) -> np.ndarray:
    """Group scales with zeros replaced by a small floor, so every group row stays meaningful."""
    scales = np.asarray(inst.scales, dtype=float).copy()
    zero = scales <= 0
    if zero.any():
        pos = inst.cost[inst.cost > 0]
        base = scales[~zero].mean() if (~zero).any() else (pos.mean() if len(pos) else 1.0)
        scales[zero] = REL_FLOOR_FACTOR * base
    return scales


def build_fair_lp(inst: FairLpInstance, neighbors: int | None = None) -> LinearProgram:
    """Write the LP for ``inst`` restricting ``z`` to each point's ``neighbors`` nearest facilities."""
    n, F = inst.cost.shape
    zu, zv = nearest_support(inst.cost, neighbors)
    nz = len(zu)
    nvar = F + nz + 1
    lam = nvar - 1
    zcols = F + np.arange(nz)
    flags: dict = {}

    # sum_v z_uv = 1
    A_eq = sp.csr_matrix((np.ones(nz), (zu, zcols)), shape=(n, nvar))
    b_eq = np.ones(n)

    # z_uv - y_v <= 0
    rows = np.concatenate([np.arange(nz), np.arange(nz)])
    cols = np.concatenate([zcols, zv])
    vals = np.concatenate([np.ones(nz), -np.ones(nz)])
    link = sp.csr_matrix((vals, (rows, cols)), shape=(nz, nvar))

    # sum_v y_v <= k
    budget = sp.csr_matrix((np.ones(F), (np.zeros(F, dtype=np.int64), np.arange(F))), shape=(1, nvar))

    d = inst.cost[zu, zv] * inst.weights[zu]
    g = inst.group_index[zu]
    if inst.mode == ABS:
        coef = d / inst.group_weights()[g]
        lam_coef = -np.ones(inst.m)
    else:
        scales = effective_scales(inst)
        zero = inst.scales <= 0
        if zero.any():
            flags["floored_groups"] = [int(i) for i in np.flatnonzero(zero)]
            flags["floor_value"] = float(scales[zero][0])
            log.warning("groups %s have zero K-Med-Approx; scale floored to %.3g", flags["floored_groups"],
                        flags["floor_value"])
        coef = d
        lam_coef = -scales
    grp = sp.csr_matrix(
        (np.concatenate([coef, lam_coef]),
         (np.concatenate([g, np.arange(inst.m)]), np.concatenate([zcols, np.full(inst.m, lam)]))),
        shape=(inst.m, nvar),
    )
    A_ub = sp.vstack([link, budget, grp]).tocsr()
    b_ub = np.concatenate([np.zeros(nz), [float(inst.k)], np.zeros(inst.m)])
    c = np.zeros(nvar)
    c[lam] = 1.0
    lo = np.zeros(nvar)
    hi = np.ones(nvar)
    hi[lam] = np.inf
    return LinearProgram(c, A_eq, b_eq, A_ub, b_ub, lo, hi, F, zu, zv, flags)


# ------------------------------------------------------------ dense simplex


def dense_simplex(c, A_eq, b_eq, A_ub, b_ub, hi, max_iter: int = 50_000, tol: float = 1e-9):
    """Two-phase tableau simplex with Bland's rule for ``x >= 0``, ``x <= hi``.

    Meant for small LPs (a few hundred columns). Returns ``(x, status)`` with
    status ``"optimal"``, ``"infeasible"``, ``"unbounded"`` or ``"iteration_limit"``.
    """
    c = np.asarray(c, dtype=float)
    A_eq = np.asarray(A_eq.toarray() if sp.issparse(A_eq) else A_eq, dtype=float).reshape(-1, len(c))
    A_ub = np.asarray(A_ub.toarray() if sp.issparse(A_ub) else A_ub, dtype=float).reshape(-1, len(c))
    b_eq = np.asarray(b_eq, dtype=float)
    b_ub = np.asarray(b_ub, dtype=float)
    nv = len(c)
    finite = np.flatnonzero(np.isfinite(hi))
    A_bd = np.zeros((len(finite), nv))
    A_bd[np.arange(len(finite)), finite] = 1.0
    A_le = np.vstack([A_ub, A_bd])
    b_le = np.concatenate([b_ub, np.asarray(hi, dtype=float)[finite]])
    n_le, n_eq = len(b_le), len(b_eq)
    rows = n_le + n_eq
    # columns: x | slacks (n_le) | artificials (rows)
    A = np.zeros((rows, nv + n_le + rows))
    b = np.concatenate([b_le, b_eq])
    A[:n_le, :nv] = A_le
    A[:n_le, nv:nv + n_le] = np.eye(n_le)
    A[n_le:, :nv] = A_eq
    neg = b < 0
    A[neg] *= -1
    b = np.where(neg, -b, b)
    basis = np.empty(rows, dtype=np.int64)
    art = nv + n_le
    need_art = np.ones(rows, dtype=bool)
    for i in range(n_le):
        if not neg[i]:
            basis[i] = nv + i
            need_art[i] = False
    for i in np.flatnonzero(need_art):
        A[i, art + i] = 1.0
        basis[i] = art + i
    T = np.zeros((rows + 1, A.shape[1] + 1))
    T[:rows, :-1] = A
    T[:rows, -1] = b

    def run(cost_row, allowed):
        T[-1, :-1] = cost_row
        T[-1, -1] = 0.0
        for i in range(rows):
            if T[-1, basis[i]] != 0:
                T[-1] -= T[-1, basis[i]] * T[i]
        for _ in range(max_iter):
            red = T[-1, :-1]
            enter = next((j for j in np.flatnonzero(red < -tol) if allowed[j]), None)
            if enter is None:
                return "optimal"
            col = T[:rows, enter]
            ok = col > tol
            if not ok.any():
                return "unbounded"
            ratios = np.full(rows, np.inf)
            ratios[ok] = T[:rows, -1][ok] / col[ok]
            rmin = ratios.min()
            cand = np.flatnonzero(ratios <= rmin + tol * max(1.0, abs(rmin)))
            leave = min(cand, key=lambda i: basis[i])
            T[leave] /= T[leave, enter]
            for i in range(rows + 1):
                if i != leave and T[i, enter] != 0:
                    T[i] -= T[i, enter] * T[leave]
            basis[leave] = enter
        return "iteration_limit"

    ncols = A.shape[1]
    allowed = np.ones(ncols, dtype=bool)
    if need_art.any():
        phase1 = np.zeros(ncols)
        phase1[art:] = 1.0
        status = run(phase1, allowed)
        if status != "optimal" or -T[-1, -1] > 1e-7 * max(1.0, np.abs(b).max()):
            return None, "infeasible" if status == "optimal" else status
        # drive remaining artificials out of the basis
        for i in range(rows):
            if basis[i] >= art:
                j = next((j for j in range(art) if abs(T[i, j]) > tol), None)
                if j is not None:
                    T[i] /= T[i, j]
                    for r in range(rows + 1):
                        if r != i and T[r, j] != 0:
                            T[r] -= T[r, j] * T[i]
                    basis[i] = j
    allowed[art:] = False
    cost2 = np.zeros(ncols)
    cost2[:nv] = c
    status = run(cost2, allowed)
    x = np.zeros(ncols)
    x[basis] = T[:rows, -1]
    return x[:nv], status


# ------------------------------------------------------------------ solving


def _trivial_feasible(inst: FairLpInstance, lp: LinearProgram) -> np.ndarray:
    """An integral point of the LP: open up to ``floor(k)`` facilities, each point to its nearest open one.

    Facilities are opened for uncovered points in order, so every point's
    support holds an open facility whenever ``floor(k)`` openings suffice;
    otherwise the budget row is left violated and the audit will say so.
    """
    F = lp.n_fac
    budget = max(1, int(inst.k))
    support: dict[int, list[int]] = {}
    for j, u in enumerate(lp.z_point):
        support.setdefault(int(u), []).append(j)
    is_open = np.zeros(F, dtype=bool)
    for f in np.argsort(inst.cost.sum(axis=0), kind="stable")[:budget]:
        is_open[f] = True
    for u in range(inst.n):
        if not is_open[lp.z_fac[support[u]]].any():
            if is_open.sum() >= budget:
                # drop the costliest open facility not needed by an earlier point
                needed = {int(lp.z_fac[j]) for v in range(u) for j in support[v] if is_open[lp.z_fac[j]]}
                spare = [f for f in np.flatnonzero(is_open) if f not in needed]
                if spare:
                    is_open[spare[-1]] = False
            is_open[lp.z_fac[support[u][int(np.argmin(inst.cost[u, lp.z_fac[support[u]]]))]]] = True
    x = np.zeros(lp.n_vars)
    x[:F] = is_open
    zc = inst.cost[lp.z_point, lp.z_fac]
    for u in range(inst.n):
        cols = [j for j in support[u] if is_open[lp.z_fac[j]]]
        x[F + min(cols, key=lambda j: (zc[j], j))] = 1.0
    resid = lp.A_ub[-inst.m:, :-1] @ x[:-1]
    scale = -lp.A_ub[-inst.m:, -1].toarray().ravel()
    x[-1] = float((resid / scale).max())
    return x


def _to_solution(lp: LinearProgram, x: np.ndarray, n: int, cost: np.ndarray, **kw) -> FractionalSolution:
    F = lp.n_fac
    zvals = np.clip(x[F:-1], 0.0, 1.0)
    z = sp.csr_matrix((zvals, (lp.z_point, lp.z_fac)), shape=(n, F))
    z.eliminate_zeros()
    R = np.bincount(lp.z_point, weights=zvals * cost[lp.z_point, lp.z_fac], minlength=n)
    return FractionalSolution(lam=float(x[-1]), y=np.clip(x[:F], 0.0, 1.0), z=z, R=R, **kw)


def solve_lp(lp: LinearProgram, inst: FairLpInstance, tol: float = 1e-7, method: str = "highs",
             time_limit: float | None = None) -> FractionalSolution:
    """Solve ``lp`` (built from ``inst``).

    ``method`` is ``"highs"`` (scipy's HiGHS) or ``"simplex"`` (the dense
    simplex above, small LPs only). On an iteration or time limit the best
    known feasible point is returned with ``converged=False``.
    """
    if method == "simplex":
        x, status = dense_simplex(lp.c, lp.A_eq, lp.b_eq, lp.A_ub, lp.b_ub, lp.hi)
        if status != "optimal":
            x = _trivial_feasible(inst, lp) if x is None else x
            return _to_solution(lp, x, inst.n, inst.cost, converged=False, status=status, method=method)
        return _to_solution(lp, x, inst.n, inst.cost, method=method)
    if method != "highs":
        raise InvalidInputError(f"unknown LP method {method!r}")
    options = {"primal_feasibility_tolerance": tol, "dual_feasibility_tolerance": tol}
    if time_limit is not None:
        options["time_limit"] = time_limit
    res = linprog(lp.c, A_ub=lp.A_ub, b_ub=lp.b_ub, A_eq=lp.A_eq, b_eq=lp.b_eq,
                  bounds=np.column_stack([lp.lo, lp.hi]), method="highs", options=options)
    if res.status == 0:
        return _to_solution(lp, res.x, inst.n, inst.cost, method=method)
    if res.status == 2:
        # only possible when the z support is restricted to too few facilities
        x = _trivial_feasible(inst, lp)
        return _to_solution(lp, x, inst.n, inst.cost, converged=False, status="infeasible", method=method)
    log.warning("LP solve did not converge: %s", res.message)
    x = res.x if res.x is not None else _trivial_feasible(inst, lp)
    return _to_solution(lp, x, inst.n, inst.cost, converged=False, status=res.message, method=method)


def solve_fair_lp(inst: FairLpInstance, neighbors: int | None = DEFAULT_NEIGHBORS, tol: float = 1e-7,
                  method: str = "highs", time_limit: float | None = None) -> tuple[FractionalSolution, LinearProgram]:
    """Build and solve, doubling the neighbour support while any point leans on its farthest kept facility."""
    T = neighbors
    while True:
        lp = build_fair_lp(inst, T)
        sol = solve_lp(lp, inst, tol, method, time_limit)
        sol.neighbors = T
        if T is None or T >= inst.n_facilities:
            return sol, lp
        if sol.status == "infeasible":
            log.info("support of %d neighbours is infeasible; re-solving with %d", T, 2 * T)
            T = 2 * T
            continue
        if not sol.converged:
            return sol, lp
        rows = np.arange(inst.n)
        sup = lp.z_fac.reshape(inst.n, T)
        far = sup[rows, np.argmax(inst.cost[rows[:, None], sup], axis=1)]
        mass = np.asarray(sol.z[rows, far]).ravel()
        if (mass <= 1e-9).all():
            return sol, lp
        log.info("z mass on the farthest kept facility for %d points; re-solving with %d neighbours",
                 int((mass > 1e-9).sum()), 2 * T)
        T = 2 * T


def audit_solution(inst: FairLpInstance, sol: FractionalSolution) -> dict[str, float]:
    """Recompute every constraint residual from ``inst`` and ``sol`` (positive = violation)."""
    z = sol.z.tocoo()
    n = inst.n
    assign = np.abs(np.asarray(sol.z.sum(axis=1)).ravel() - 1.0).max()
    link = max(0.0, float((z.data - sol.y[z.col]).max(initial=0.0)))
    budget = max(0.0, float(sol.y.sum() - inst.k))
    R = np.bincount(z.row, weights=z.data * inst.cost[z.row, z.col], minlength=n)
    gsum = np.bincount(inst.group_index, weights=inst.weights * R, minlength=inst.m)
    if inst.mode == ABS:
        grp = gsum / inst.group_weights() - sol.lam
    else:
        grp = gsum - sol.lam * inst.scales
    bounds = max(0.0, float(-sol.y.min()), float(sol.y.max() - 1.0), float(-z.data.min(initial=0.0)),
                 float(z.data.max(initial=0.0) - 1.0))
    return {
        "assignment": float(assign),
        "link": link,
        "budget": budget,
        "group": max(0.0, float(grp.max())),
        "bounds": bounds,
        "R_consistency": float(np.abs(R - sol.R).max()),
    }


def max_residual(audit: dict[str, float]) -> float:
    return max(audit.values())


# ----------------------------------------------------------- triplet format


def write_lp_triplets(lp: LinearProgram, path) -> None:
    """Plain-text sparse export: one record per line, whitespace separated.

    ``vars N`` / ``meta n_fac F`` / ``zcol j u v`` / ``c j val`` /
    ``bound j lo hi`` / ``eq i j val`` / ``eq_rhs i val`` / ``ub i j val`` / ``ub_rhs i val``.
    """
    lines = ["fairlp-triplets 1", f"vars {lp.n_vars}", f"meta n_fac {lp.n_fac}",
             f"meta rows_eq {lp.A_eq.shape[0]}", f"meta rows_ub {lp.A_ub.shape[0]}"]
    for j, (u, v) in enumerate(zip(lp.z_point, lp.z_fac)):
        lines.append(f"zcol {lp.n_fac + j} {u} {v}")
    for j in np.flatnonzero(lp.c):
        lines.append(f"c {j} {float(lp.c[j])!r}")
    for j in range(lp.n_vars):
        lines.append(f"bound {j} {float(lp.lo[j])!r} {float(lp.hi[j])!r}")
    for tag, A, b in (("eq", lp.A_eq, lp.b_eq), ("ub", lp.A_ub, lp.b_ub)):
        coo = A.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            lines.append(f"{tag} {i} {j} {float(v)!r}")
        for i, v in enumerate(b):
            lines.append(f"{tag}_rhs {i} {float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_lp_triplets(path) -> LinearProgram:
    meta: dict[str, int] = {}
    nvar = 0
    zcols: list[tuple[int, int, int]] = []
    c_ent, bounds, eq, ub, eq_rhs, ub_rhs = [], [], [], [], {}, {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        parts = raw.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "vars":
            nvar = int(parts[1])
        elif tag == "meta":
            meta[parts[1]] = int(parts[2])
        elif tag == "zcol":
            zcols.append((int(parts[1]), int(parts[2]), int(parts[3])))
        elif tag == "c":
            c_ent.append((int(parts[1]), float(parts[2])))
        elif tag == "bound":
            bounds.append((int(parts[1]), float(parts[2]), float(parts[3])))
        elif tag in ("eq", "ub"):
            (eq if tag == "eq" else ub).append((int(parts[1]), int(parts[2]), float(parts[3])))
        elif tag == "eq_rhs":
            eq_rhs[int(parts[1])] = float(parts[2])
        elif tag == "ub_rhs":
            ub_rhs[int(parts[1])] = float(parts[2])
        else:
            raise InvalidInputError(f"unknown triplet record {tag!r}")
    c = np.zeros(nvar)
    for j, v in c_ent:
        c[j] = v
    lo, hi = np.zeros(nvar), np.ones(nvar)
    for j, a, b in bounds:
        lo[j], hi[j] = a, b

    def mat(entries, nrows):
        if not entries:
            return sp.csr_matrix((nrows, nvar))
        r, cc, v = zip(*entries)
        return sp.csr_matrix((v, (r, cc)), shape=(nrows, nvar))

    n_eq, n_ub = meta["rows_eq"], meta["rows_ub"]
    zcols.sort()
    return LinearProgram(
        c=c, A_eq=mat(eq, n_eq), b_eq=np.array([eq_rhs[i] for i in range(n_eq)]),
        A_ub=mat(ub, n_ub), b_ub=np.array([ub_rhs[i] for i in range(n_ub)]), lo=lo, hi=hi,
        n_fac=meta["n_fac"], z_point=np.array([u for _, u, _ in zcols], dtype=np.int64),
        z_fac=np.array([v for _, _, v in zcols], dtype=np.int64),
    )
