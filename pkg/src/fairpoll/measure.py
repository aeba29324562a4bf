"""Group disparity statistics for access to assigned sites: distance, load,
their normalizations, and the worst-decile breakdown."""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geo
from .dataset import Site, VoterRecord
from .geo import InvalidInputError, Metric

DENSITY_SAMPLE_THRESHOLD = 2000
DENSITY_SAMPLE_SIZE = 2000
SCHOOL_LIB_FLOOR = 1e-3
DECILE = 0.1
REPORT_SCHEMA_VERSION = 1


class ReferentialError(InvalidInputError):
    """Voters pointing at missing sites, or voters with no site at all."""

    def __init__(self, message: str, offending: Sequence[str]):
        self.offending = list(offending)
        shown = ", ".join(self.offending[:20]) + (" ..." if len(self.offending) > 20 else "")
        super().__init__(f"{message}: {shown}")


class InvalidStateError(RuntimeError):
    pass


@dataclass
class AccessData:
    """Per-voter arrays for one voter/site/assignment triple."""

    voter_ids: list[str]
    labels: list[str]
    group_index: np.ndarray
    coords: np.ndarray
    site_ids: list[str]
    site_coords: np.ndarray
    site_index: np.ndarray
    distance: np.ndarray
    load: np.ndarray
    precinct: list[str | None]
    county: list[str | None]
    metric: Metric

    @property
    def n(self) -> int:
        return len(self.voter_ids)

    @property
    def m(self) -> int:
        return len(self.labels)


def prepare(voters: Sequence[VoterRecord], sites: Sequence[Site], assignment: dict[str, str] | None,
            metric: Metric, labels: Sequence[str] | None = None) -> AccessData:
    """Resolve every voter's site and compute distance and load.

    ``assignment`` maps voter id to site id; when omitted each voter's own
    ``assigned_site`` is used.
    """
    if not voters:
        raise InvalidInputError("no voters")
    pos = {s.id: i for i, s in enumerate(sites)}
    site_of = [assignment.get(v.id) if assignment is not None else v.assigned_site for v in voters]
    missing = [v.id for v, s in zip(voters, site_of) if s is None]
    if missing:
        raise ReferentialError("voters without an assigned site", missing)
    dangling = sorted({s for s in site_of if s not in pos})
    if dangling:
        raise ReferentialError("assignment references unknown site ids", dangling)
    labels = list(labels) if labels is not None else sorted({v.group for v in voters})
    gpos = {g: i for i, g in enumerate(labels)}
    coords = np.array([[v.location.lat, v.location.lon] for v in voters], dtype=float)
    site_coords = np.array([[s.location.lat, s.location.lon] for s in sites], dtype=float)
    site_index = np.array([pos[s] for s in site_of], dtype=np.int64)
    dist = geo.paired_distance(coords, site_coords[site_index], metric)
    counts = np.bincount(site_index, minlength=len(sites)).astype(float)
    return AccessData(
        voter_ids=[v.id for v in voters], labels=labels,
        group_index=np.array([gpos[v.group] for v in voters], dtype=np.int64),
        coords=coords, site_ids=[s.id for s in sites], site_coords=site_coords, site_index=site_index,
        distance=dist, load=counts[site_index],
        precinct=[v.precinct for v in voters], county=[v.county for v in voters], metric=metric)


# ------------------------------------------------------------------ reports


@dataclass
class GroupStats:
    group: str
    count: int
    mean_distance: float
    median_distance: float
    max_distance: float
    mean_load: float
    median_load: float


@dataclass
class NormalizedRow:
    group: str
    school_lib_mean: float
    school_lib_median: float
    density_mean: float
    density_median: float
    norm_load: float


@dataclass
class DisparityReport:
    groups: list[GroupStats]
    overall: GroupStats
    normalized: list[NormalizedRow] = field(default_factory=list)
    density_excluded: int = 0
    majority: str | None = None

    def group(self, label: str) -> GroupStats:
        return next(g for g in self.groups if g.group == label)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "groups": [asdict(g) for g in self.groups],
            "overall": asdict(self.overall),
            "normalized": [asdict(r) for r in self.normalized],
            "density_excluded": self.density_excluded,
            "majority": self.majority,
        }


def _stats(label, dist, load) -> GroupStats:
    if len(dist) == 0:
        nan = float("nan")
        return GroupStats(label, 0, nan, nan, nan, nan, nan)
    return GroupStats(label, int(len(dist)), float(dist.mean()), float(np.median(dist)), float(dist.max()),
                      float(load.mean()), float(np.median(load)))


def access_stats(data: AccessData) -> DisparityReport:
    """Raw per-group distance and load statistics.

    A voter's load is the number of voters at its site, so a group's load
    statistics run over its members, each contributing its own site's count.
    """
    groups = [_stats(lab, data.distance[data.group_index == g], data.load[data.group_index == g])
              for g, lab in enumerate(data.labels)]
    return DisparityReport(groups, _stats("overall", data.distance, data.load))


def _per_group(values, group_index, labels, valid=None):
    out = {}
    for g, lab in enumerate(labels):
        sel = group_index == g
        if valid is not None:
            sel &= valid
        v = values[sel]
        out[lab] = (float(v.mean()), float(np.median(v))) if len(v) else (float("nan"), float("nan"))
    return out


def normalize_school_lib(data: AccessData, reference_sites: Sequence[Site], floor: float = SCHOOL_LIB_FLOOR):
    """Assigned distance over distance to the nearest reference site (floored).

    Returns ``(ratio per voter, {group: (mean, median)})``.
    """
    if not reference_sites:
        raise InvalidInputError("no reference sites")
    ref = np.array([[s.location.lat, s.location.lon] for s in reference_sites], dtype=float)
    _, dref = geo.nearest(data.coords, ref, data.metric)
    ratio = data.distance / np.maximum(dref, floor)
    return ratio, _per_group(ratio, data.group_index, data.labels)


def _row_medians_excluding_self(block: np.ndarray, self_col: np.ndarray | None) -> np.ndarray:
    if self_col is None:
        return np.median(block, axis=1)
    keep = np.ones(block.shape, dtype=bool)
    has = self_col >= 0
    keep[np.flatnonzero(has), self_col[has]] = False
    out = np.empty(len(block))
    # rows with and without themselves among the peers have different peer counts
    if has.any():
        out[has] = np.median(block[has][keep[has]].reshape(int(has.sum()), -1), axis=1)
    if (~has).any():
        out[~has] = np.median(block[~has], axis=1)
    return out


def precinct_medians(data: AccessData, threshold: int = DENSITY_SAMPLE_THRESHOLD,
                     sample: int = DENSITY_SAMPLE_SIZE, seed: int = 0) -> np.ndarray:
    """Each voter's median distance to the other members of its precinct.

    Exact for precincts of at most ``threshold`` members; larger precincts
    use one seeded uniform sample of ``sample`` peers. Voters with no
    precinct or no peers get NaN.
    """
    med = np.full(data.n, np.nan)
    by_precinct: dict[str, list[int]] = {}
    for i, p in enumerate(data.precinct):
        if p is not None:
            by_precinct.setdefault(p, []).append(i)
    for p in sorted(by_precinct):
        members = np.array(by_precinct[p], dtype=np.int64)
        if len(members) < 2:
            continue
        if len(members) <= threshold:
            peers = members
            self_col = np.arange(len(members))
        else:
            rng = np.random.default_rng([seed, int.from_bytes(p.encode()[:8].ljust(8, b"\0"), "little")])
            peers = np.sort(rng.choice(members, size=sample, replace=False))
            where = {int(v): j for j, v in enumerate(peers)}
            self_col = np.array([where.get(int(v), -1) for v in members], dtype=np.int64)
        for start, block in geo.iter_blocks(data.coords[members], data.coords[peers], data.metric, 1024):
            med[members[start:start + len(block)]] = _row_medians_excluding_self(
                block, self_col[start:start + len(block)])
    return med


def normalize_density(data: AccessData, threshold: int = DENSITY_SAMPLE_THRESHOLD,
                      sample: int = DENSITY_SAMPLE_SIZE, seed: int = 0):
    """Assigned distance over the voter's median distance to precinct peers.

    Voters whose median is zero or undefined are excluded (NaN) and counted.
    Returns ``(ratio per voter, excluded count, {group: (mean, median)})``.
    """
    med = precinct_medians(data, threshold, sample, seed)
    valid = np.isfinite(med) & (med > 0)
    ratio = np.full(data.n, np.nan)
    ratio[valid] = data.distance[valid] / med[valid]
    return ratio, int((~valid).sum()), _per_group(ratio, data.group_index, data.labels, valid)


def majority_group(report: DisparityReport) -> str:
    """Largest group by count, first in label order on ties."""
    return max(report.groups, key=lambda g: g.count).group


def normalize_load(report: DisparityReport) -> dict[str, float]:
    """Each group's median load divided by the majority group's median load."""
    major = report.group(majority_group(report))
    if not major.median_load > 0:
        raise InvalidStateError(f"majority group {major.group!r} has median load {major.median_load}")
    return {g.group: (1.0 if g.group == major.group else g.median_load / major.median_load)
            for g in report.groups}


def normalized_report(data: AccessData, reference_sites: Sequence[Site], seed: int = 0,
                      threshold: int = DENSITY_SAMPLE_THRESHOLD, sample: int = DENSITY_SAMPLE_SIZE
                      ) -> DisparityReport:
    """Raw statistics plus both distance normalizations and the load ratio."""
    report = access_stats(data)
    _, sl = normalize_school_lib(data, reference_sites)
    _, excluded, dens = normalize_density(data, threshold, sample, seed)
    loads = normalize_load(report)
    report.normalized = [NormalizedRow(lab, *sl[lab], *dens[lab], loads[lab]) for lab in data.labels]
    report.density_excluded = excluded
    report.majority = majority_group(report)
    return report


# ------------------------------------------------------------ worst decile


@dataclass
class DecileRow:
    group: str
    share: float
    count: int
    median: float


@dataclass
class WorstDecileReport:
    by: str
    cohort_size: int
    cutoff: float
    rows: list[DecileRow]

    def to_dict(self) -> dict:
        return {"by": self.by, "cohort_size": self.cohort_size, "cutoff": self.cutoff,
                "rows": [asdict(r) for r in self.rows]}


def worst_decile(values, group_index, voter_ids: Sequence[str], labels: Sequence[str], by: str = "distance"
                 ) -> WorstDecileReport:
    """Group make-up of the ``ceil(0.1 n)`` voters with the largest values.

    Ties are broken by ascending voter id.
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n < 10:
        raise InvalidInputError("worst-decile analysis needs at least 10 voters")
    size = math.ceil(DECILE * n)
    ids = np.array(voter_ids)
    order = np.lexsort((ids, -values))
    cohort = order[:size]
    gi = np.asarray(group_index)[cohort]
    rows = []
    for g, lab in enumerate(labels):
        v = values[cohort][gi == g]
        rows.append(DecileRow(lab, len(v) / size, int(len(v)), float(np.median(v)) if len(v) else float("nan")))
    return WorstDecileReport(by, size, float(values[cohort].min()), rows)


def county_gaps(data: AccessData, distance=None) -> dict[str, float]:
    """Per county: largest minus smallest group median distance."""
    distance = data.distance if distance is None else np.asarray(distance)
    county = np.array([c if c is not None else "" for c in data.county])
    out = {}
    for c in sorted(set(county.tolist())):
        sel = county == c
        meds = [np.median(distance[sel & (data.group_index == g)]) for g in range(data.m)
                if (sel & (data.group_index == g)).any()]
        out[c] = float(max(meds) - min(meds))
    return out


# ------------------------------------------------------------ serialization

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_STATS = {
    "type": "object",
    "required": ["group", "count", "mean_distance", "median_distance", "max_distance", "mean_load",
                 "median_load"],
    "properties": {"group": {"type": "string"}, "count": {"type": "integer", "minimum": 0},
                   "mean_distance": _NUM_OR_NULL, "median_distance": _NUM_OR_NULL, "max_distance": _NUM_OR_NULL,
                   "mean_load": _NUM_OR_NULL, "median_load": _NUM_OR_NULL},
}

REPORT_JSON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "raw", "normalized", "worst_decile"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "raw": {"type": "object", "required": ["groups", "overall"],
                "properties": {"groups": {"type": "array", "items": _STATS}, "overall": _STATS}},
        "normalized": {
            "type": "object", "required": ["rows", "density_excluded", "majority"],
            "properties": {
                "rows": {"type": "array", "items": {
                    "type": "object",
                    "required": ["group", "school_lib_mean", "school_lib_median", "density_mean",
                                 "density_median", "norm_load"],
                    "properties": {"group": {"type": "string"}, "norm_load": _NUM}}},
                "density_excluded": {"type": "integer", "minimum": 0},
                "majority": {"type": "string"}}},
        "worst_decile": {"type": "array", "items": {
            "type": "object", "required": ["by", "cohort_size", "cutoff", "rows"],
            "properties": {"by": {"enum": ["distance", "load"]}, "cohort_size": {"type": "integer"},
                           "cutoff": _NUM,
                           "rows": {"type": "array", "items": {
                               "type": "object", "required": ["group", "share", "count", "median"]}}}}},
    },
}


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def report_document(report: DisparityReport, deciles: Sequence[WorstDecileReport]) -> dict:
    d = report.to_dict()
    return _clean({
        "schema_version": REPORT_SCHEMA_VERSION,
        "raw": {"groups": d["groups"], "overall": d["overall"]},
        "normalized": {"rows": d["normalized"], "density_excluded": d["density_excluded"],
                       "majority": d["majority"]},
        "worst_decile": [w.to_dict() for w in deciles],
    })


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(doc: dict, path) -> None:
    text = json.dumps(_clean(json.loads(json.dumps(doc, default=_jsonable))), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _fmt(x, digits: int = 2) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "" if x is None or not math.isfinite(x) else f"{x:.{digits}f}"


def write_table(path, header: Sequence[str], rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else _fmt(c) for c in r])


def write_raw_csv(report: DisparityReport, path) -> None:
    cols = ["group", "count", "mean_distance", "median_distance", "max_distance", "mean_load", "median_load"]
    write_table(path, cols, [[getattr(g, c) for c in cols] for g in [*report.groups, report.overall]])


def write_normalized_csv(report: DisparityReport, path) -> None:
    cols = ["group", "school_lib_mean", "school_lib_median", "density_mean", "density_median", "norm_load"]
    write_table(path, cols, [[getattr(r, c) for c in cols] for r in report.normalized])


def write_decile_csv(deciles: Sequence[WorstDecileReport], path) -> None:
    rows = [[w.by, r.group, r.share, r.count, r.median] for w in deciles for r in w.rows]
    write_table(path, ["by", "group", "share", "count", "median"], rows)
