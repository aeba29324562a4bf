"""Command-line pipelines: synth, measure, plan, sweep, compare, theorems."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import baseline, coreset, dataset, fairlp, geo, measure, rounding, theorems
from .balance import (CAPACITY_PRESETS, capacity_sweep, derived_capacity, kcenter_coreset, l_balanced_split)
from .dataset import Site
from .geo import GeoPoint, InvalidInputError

log = logging.getLogger("fairpoll")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_THEOREM = 4

POLICIES = ("sites-only", "schools+libraries+polling", "all-points")
MANIFEST_VERSION = 1


class SolverError(RuntimeError):
    def __init__(self, message: str, manifest: dict):
        super().__init__(message)
        self.manifest = manifest


# ------------------------------------------------------------------ helpers


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_record(path) -> dict:
    return {"name": Path(path).name, "sha256": _digest(path)}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, manifest: dict) -> None:
    measure.write_json(manifest, out / "manifest.json")


def _metric(args) -> geo.Metric:
    return geo.metric_from_name(args.metric)


def _load(args):
    for p in (args.voters, args.sites):
        if not Path(p).is_file():
            raise InvalidInputError(f"{p}: file not found")
    voters, drops = dataset.load_voters(args.voters)
    if not voters:
        raise InvalidInputError(f"{args.voters}: no voter rows with usable coordinates")
    sites = dataset.load_sites(args.sites)
    assignment = None
    if getattr(args, "assignment", None):
        if not Path(args.assignment).is_file():
            raise InvalidInputError(f"{args.assignment}: file not found")
        assignment = dataset.load_assignment(args.assignment)
    return voters, drops, sites, assignment


def _split_sites(sites):
    polling = [s for s in sites if s.kind == "polling"]
    reference = [s for s in sites if s.kind != "polling"]
    return polling, reference


def _measure(voters, sites, assignment, reference, metric, labels, seed):
    data = measure.prepare(voters, sites, assignment, metric, labels)
    report = measure.normalized_report(data, reference, seed=seed) if reference else measure.access_stats(data)
    if not reference:
        loads = measure.normalize_load(report)
        report.majority = measure.majority_group(report)
        report.normalized = [measure.NormalizedRow(lab, *(float("nan"),) * 4, loads[lab]) for lab in data.labels]
    deciles = [measure.worst_decile(data.distance, data.group_index, data.voter_ids, data.labels, "distance"),
               measure.worst_decile(data.load, data.group_index, data.voter_ids, data.labels, "load")]
    return data, report, deciles


def _write_reports(out: Path, prefix: str, report, deciles) -> None:
    measure.write_raw_csv(report, out / f"{prefix}_raw.csv")
    measure.write_normalized_csv(report, out / f"{prefix}_normalized.csv")
    measure.write_decile_csv(deciles, out / f"{prefix}_worst_decile.csv")
    measure.write_json(measure.report_document(report, deciles), out / f"{prefix}.json")


def _max_group_school_lib_median(report) -> float | None:
    vals = [r.school_lib_median for r in report.normalized if np.isfinite(r.school_lib_median)]
    return max(vals) if vals else None


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = dataset.default_synth_config(args.n_voters, args.n_sites)
    voters, sites = dataset.synth_state(args.seed, cfg)
    dataset.write_voters(voters, out / "voters.csv")
    dataset.write_sites(sites, out / "sites.csv")
    dataset.write_assignment({v.id: v.assigned_site for v in voters}, out / "assignment.csv")
    _write_manifest(out, {"manifest_version": MANIFEST_VERSION, "command": "synth", "seed": args.seed,
                          "n_voters": args.n_voters, "n_sites": args.n_sites,
                          "groups": cfg.groups, "regions": [r.name for r in cfg.regions]})
    print(f"wrote {len(voters)} voters and {len(sites)} sites to {out}")
    return EXIT_OK


def cmd_measure(args) -> int:
    out = _out_dir(args)
    voters, drops, sites, assignment = _load(args)
    polling, reference = _split_sites(sites)
    metric = _metric(args)
    _, report, deciles = _measure(voters, sites, assignment, reference, metric, None, args.seed)
    _write_reports(out, "report", report, deciles)
    manifest = {"manifest_version": MANIFEST_VERSION, "command": "measure", "seed": args.seed,
                "metric": metric.describe(), "dropped_rows": drops, "density_excluded": report.density_excluded,
                "inputs": [_input_record(p) for p in (args.voters, args.sites, args.assignment) if p]}
    _write_manifest(out, manifest)
    for g in report.groups:
        print(f"{g.group:>10}  n={g.count:<8d} median distance={g.median_distance:.2f}  median load={g.median_load:.0f}")
    return EXIT_OK


def _candidates(policy: str, sites, cs: coreset.Coreset, voters):
    polling, _ = _split_sites(sites)
    if policy == "sites-only":
        chosen = polling
    elif policy == "schools+libraries+polling":
        chosen = list(sites)
    elif policy == "all-points":
        chosen = [Site(f"C{voters[i].id}", voters[i].location, "polling") for i in cs.source]
    else:
        raise InvalidInputError(f"unknown facility policy {policy!r}")
    if not chosen:
        raise InvalidInputError(f"facility policy {policy!r} leaves no candidate sites")
    return chosen


def run_plan(args, voters, sites, assignment, metric) -> dict:
    """Coreset, LP, rounding, optional split, full assignment. Returns the pieces for reporting."""
    labels = sorted({v.group for v in voters})
    polling, reference = _split_sites(sites)
    full = dataset.dataset_from_voters(voters, polling or sites, metric, labels)
    k = args.k or len(polling)
    if k < 1:
        raise InvalidInputError("k must be >= 1 (no polling sites to derive it from)")
    cs = coreset.grouped_coreset(full, k, args.coreset_eps, args.coreset_delta, args.seed, args.coreset_c,
                                 max_size=args.coreset_size)
    cands = _candidates(args.facility_policy, sites, cs, voters)
    if k > len(cands):
        raise InvalidInputError(f"k={k} exceeds {len(cands)} candidate facilities")
    fac = geo.points_array([s.location for s in cands])
    cds = cs.as_dataset(fac, k)
    cost = cds.cost_matrix()
    scales = None
    if args.objective == fairlp.REL:
        scales = np.array([baseline.kmed_approx(cost[cds.group_index == g], k, cds.weights[cds.group_index == g],
                                                seed=args.seed) for g in range(cds.m)])
    inst = fairlp.FairLpInstance.from_dataset(cds, k, args.objective, scales, cost=cost)
    sol, lp = fairlp.solve_fair_lp(inst, time_limit=args.lp_time_limit)
    audit = fairlp.audit_solution(inst, sol)
    stages: dict = {
        "coreset": {k_: v for k_, v in cs.provenance.items()},
        "lp": {"objective": args.objective, "lambda": sol.lam, "status": sol.status, "converged": sol.converged,
               "neighbors": sol.neighbors, "variables": lp.n_vars, "nonzeros": lp.nnz,
               "max_residual": fairlp.max_residual(audit), "flags": lp.flags,
               "scales": None if scales is None else scales.tolist()},
    }
    if not sol.converged:
        raise SolverError(f"LP did not converge: {sol.status}", stages)

    if args.rounding == "filter":
        fr = rounding.filtering_round(inst, sol, args.epsilon)
        opened = np.unique(fr.centers)
        stages["rounding"] = {"method": "filter", "epsilon": args.epsilon, "opened": int(len(opened)),
                              "bound_max_violation": float((fr.assignment.distance - fr.bound).max()),
                              "coreset_group_average": fr.assignment.group_average.tolist()}
    else:
        summ = rounding.dependent_round(inst, sol, k, args.trials, args.seed)
        best = summ.best()
        opened = np.sort(best.centers)
        lo, hi = summ.confidence_interval()
        stages["rounding"] = {"method": "dependent", "trials": args.trials, "seed": args.seed,
                              "best_trial": best.trial, "opened": int(len(opened)),
                              "group_mean": summ.group_mean.tolist(), "ci_low": lo.tolist(), "ci_high": hi.tolist(),
                              "coreset_group_average": best.group_average.tolist()}

    planned = [Site(cands[j].id, cands[j].location, cands[j].kind) for j in opened]
    near, _ = geo.nearest(full.coords, fac[opened], metric)
    if args.eps_cap is not None:
        L = derived_capacity(args.eps_cap[0], len(voters), len(planned))
        res = l_balanced_split(full.coords, metric, fac[opened], near, L)
        new_sites = []
        for j, (kind, idx) in enumerate(res.center_source):
            if kind == "facility":
                new_sites.append(planned[idx])
            else:
                loc = GeoPoint(float(full.coords[idx, 0]), float(full.coords[idx, 1]))
                new_sites.append(Site(f"N{j:05d}", loc, "polling"))
        planned, near = new_sites, res.assignment
        stages["balance"] = {"eps_cap": args.eps_cap[0], "L": L, "extra_sites": res.extra_sites,
                             "max_load": float(res.load.max()), "overflow": res.overflow,
                             "max_inflation_ok": bool((res.distance <= 2 * res.original_distance).all())}
    new_assignment = {v.id: planned[near[i]].id for i, v in enumerate(voters)}
    return {"labels": labels, "planned": planned, "assignment": new_assignment, "stages": stages,
            "reference": reference, "k": k}


def cmd_plan(args) -> int:
    out = _out_dir(args)
    voters, drops, sites, assignment = _load(args)
    metric = _metric(args)
    manifest = {"manifest_version": MANIFEST_VERSION, "command": "plan", "seed": args.seed,
                "metric": metric.describe(), "config": _config(args),
                "inputs": [_input_record(p) for p in (args.voters, args.sites, args.assignment) if p]}
    try:
        plan = run_plan(args, voters, sites, assignment, metric)
    except SolverError as exc:
        manifest["stages"] = exc.manifest
        _write_manifest(out, manifest)
        raise
    labels, reference = plan["labels"], plan["reference"]
    before_data, before, before_dec = _measure(voters, sites, assignment, reference, metric, labels, args.seed)
    after_sites = _dedupe_sites(plan["planned"], sites)
    after_data, after, after_dec = _measure(voters, after_sites, plan["assignment"], reference, metric, labels,
                                            args.seed)
    _write_reports(out, "before", before, before_dec)
    _write_reports(out, "after", after, after_dec)
    dataset.write_sites(plan["planned"], out / "planned_sites.csv")
    dataset.write_assignment(plan["assignment"], out / "planned_assignment.csv")
    gb, ga = measure.county_gaps(before_data), measure.county_gaps(after_data)
    measure.write_table(out / "county_gaps.csv", ["county", "gap_before", "gap_after"],
                        [[c, gb[c], ga[c]] for c in sorted(gb)])
    manifest["stages"] = plan["stages"]
    manifest["k"] = plan["k"]
    manifest["planned_sites"] = len(plan["planned"])
    manifest["max_group_school_lib_median"] = {"before": _max_group_school_lib_median(before),
                                               "after": _max_group_school_lib_median(after)}
    manifest["county_gaps"] = {"before": gb, "after": ga}
    _write_manifest(out, manifest)
    print(f"opened {len(plan['planned'])} sites; LP lambda={plan['stages']['lp']['lambda']:.4g}")
    for rb, ra in zip(before.groups, after.groups):
        print(f"{rb.group:>10}  median distance {rb.median_distance:.2f} -> {ra.median_distance:.2f}")
    return EXIT_OK


def _dedupe_sites(planned, sites):
    known = {s.id for s in sites}
    return list(sites) + [s for s in planned if s.id not in known]


def _used_centers(voters, sites, assignment, metric):
    pos = {s.id: s for s in sites}
    site_of = [assignment[v.id] if assignment is not None else v.assigned_site for v in voters]
    dangling = sorted({s for s in site_of if s not in pos})
    if dangling:
        raise measure.ReferentialError("assignment references unknown site ids", dangling)
    used = sorted(set(site_of))
    idx = {s: i for i, s in enumerate(used)}
    coords = geo.points_array([pos[s].location for s in used])
    return used, coords, np.array([idx[s] for s in site_of], dtype=np.int64)


def sweep_tables(rows) -> tuple[list, list]:
    head = ["metric", *[f"eps={r.eps_cap:g}" for r in rows]]
    balanced = [head,
                ["Number of extra polling sites", *[r.extra_sites for r in rows]],
                ["Mean #voters per location", *[round(r.mean_load) for r in rows]],
                ["Std. dev. of number of voters per location", *[round(r.std_load) for r in rows]]]
    kcenter = [head,
               ["Mean #voters per location", *[None if r.kcenter_mean_load is None else round(r.kcenter_mean_load)
                                              for r in rows]],
               ["Std. dev. of number of voters per location",
                *[None if r.kcenter_std_load is None else round(r.kcenter_std_load) for r in rows]]]
    return balanced, kcenter


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    voters, _, sites, assignment = _load(args)
    metric = _metric(args)
    used, centers, pos = _used_centers(voters, sites, assignment, metric)
    pts = geo.points_array([v.location for v in voters])
    eps_caps = args.eps_cap or list(CAPACITY_PRESETS)
    k = args.k or len(used)
    kc = kcenter_coreset(pts, metric, k, args.chunks, args.seed)
    rows = capacity_sweep(pts, metric, centers, pos, len(used), eps_caps, kcenter=kc, k=k)
    balanced, kcenter = sweep_tables(rows)
    for name, table in (("sweep_balanced.csv", balanced), ("sweep_kcenter.csv", kcenter)):
        measure.write_table(out / name, table[0], table[1:])
    extra = [r.extra_sites for r in rows]
    stds = [r.std_load for r in rows]
    audits = {
        "extra_sites_non_increasing": all(a >= b for a, b in zip(extra, extra[1:])),
        "std_non_decreasing": all(a <= b for a, b in zip(stds, stds[1:])),
        "split_audits_ok": all(r.split_audit_ok for r in rows),
    }
    _write_manifest(out, {"manifest_version": MANIFEST_VERSION, "command": "sweep", "seed": args.seed,
                          "metric": metric.describe(), "k": k, "n_sites": len(used), "chunks": args.chunks,
                          "kcenter_coreset_size": int(len(kc.coords)),
                          "rows": [vars(r) for r in rows], "audits": audits,
                          "inputs": [_input_record(p) for p in (args.voters, args.sites, args.assignment) if p]})
    for row in balanced:
        print(",".join(str(c) for c in row))
    if not audits["std_non_decreasing"]:
        log.warning("load std is not non-decreasing in eps_cap: %s", stds)
    return EXIT_OK


def cmd_compare(args) -> int:
    out = _out_dir(args)
    voters, _, sites, assignment = _load(args)
    if not Path(args.against).is_file():
        raise InvalidInputError(f"{args.against}: file not found")
    other = dataset.load_assignment(args.against)
    if args.against_sites:
        sites = _dedupe_sites(dataset.load_sites(args.against_sites), sites)
    _, reference = _split_sites(sites)
    metric = _metric(args)
    labels = sorted({v.group for v in voters})
    da, ra, _ = _measure(voters, sites, assignment, reference, metric, labels, args.seed)
    db, rb, _ = _measure(voters, sites, other, reference, metric, labels, args.seed)
    rows = []
    for ga, gb, na, nb in zip(ra.groups, rb.groups, ra.normalized, rb.normalized):
        rows.append([ga.group, ga.median_distance, gb.median_distance, na.school_lib_median, nb.school_lib_median,
                     na.norm_load, nb.norm_load])
    measure.write_table(out / "compare.csv", ["group", "median_distance_a", "median_distance_b",
                                              "school_lib_median_a", "school_lib_median_b",
                                              "norm_load_a", "norm_load_b"], rows)
    gap_a, gap_b = measure.county_gaps(da), measure.county_gaps(db)
    measure.write_table(out / "county_gaps.csv", ["county", "gap_a", "gap_b"],
                        [[c, gap_a[c], gap_b[c]] for c in sorted(gap_a)])
    for r in rows:
        print(f"{r[0]:>10}  median distance {r[1]:.2f} vs {r[2]:.2f}")
    return EXIT_OK


def cmd_theorems(args) -> int:
    checks = theorems.run_all()
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.ok for c in checks) else EXIT_THEOREM


# ------------------------------------------------------------------- parser


def _config(args) -> dict:
    keep = ("k", "epsilon", "eps_cap", "coreset_eps", "coreset_delta", "coreset_c", "coreset_size",
            "facility_policy", "seed", "rounding", "trials", "objective", "metric")
    return {k: getattr(args, k) for k in keep if hasattr(args, k)}


def _eps_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad eps list {text!r}") from exc
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("eps-cap values must be non-negative")
    return vals


def _open_unit(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"{text} must lie in (0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairpoll", description="Group disparity measurement and fair site planning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, assignment=True):
        sp.add_argument("--voters", required=True)
        sp.add_argument("--sites", required=True)
        if assignment:
            sp.add_argument("--assignment", help="voter_id,site_id CSV; defaults to the voters' site_id column")
        sp.add_argument("--metric", default="haversine", choices=["haversine", "euclidean", "sqeuclidean"])
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="write a synthetic state")
    s.add_argument("--n-voters", type=int, default=100_000)
    s.add_argument("--n-sites", type=int, default=40)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("measure", help="distance/load disparity reports")
    common(s)
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("plan", help="fair re-planning of site locations")
    common(s)
    s.add_argument("--k", type=int, help="sites to open; defaults to the number of polling sites")
    s.add_argument("--epsilon", type=_open_unit, default=0.5, help="filtering rounding parameter")
    s.add_argument("--eps-cap", type=_eps_list, help="capacity slack; splits clusters above (1+eps) x average")
    s.add_argument("--coreset-eps", type=_open_unit, default=0.2)
    s.add_argument("--coreset-delta", type=_open_unit, default=0.1)
    s.add_argument("--coreset-c", type=float, default=10.0)
    s.add_argument("--coreset-size", type=int, help="cap on sampled points per group")
    s.add_argument("--facility-policy", choices=POLICIES, default="schools+libraries+polling")
    s.add_argument("--rounding", choices=["filter", "dependent"], default="dependent")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--objective", choices=[fairlp.ABS, fairlp.REL], default=fairlp.ABS)
    s.add_argument("--lp-time-limit", type=float)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("sweep", help="capacity sweep for balanced k-median and capacitated k-center")
    common(s)
    s.add_argument("--eps-cap", type=_eps_list)
    s.add_argument("--k", type=int, help="k-center site count; defaults to the number of sites in use")
    s.add_argument("--chunks", type=int, default=10)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare", help="compare two assignments of the same voters")
    common(s)
    s.add_argument("--against", required=True, help="second voter_id,site_id CSV")
    s.add_argument("--against-sites", help="extra sites referenced by the second assignment")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("theorems", help="run the theorem-instance regression checks")
    s.set_defaults(func=cmd_theorems)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InvalidInputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
