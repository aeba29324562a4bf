"""Voter/site records, CSV ingestion, a synthetic state generator and the
adversarial instances used by the regression suite."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geo
from .geo import GeoPoint, InvalidInputError, Metric

SITE_KINDS = ("polling", "school", "library")


class SchemaError(ValueError):
    """A CSV file does not carry the configured columns."""


@dataclass(frozen=True)
class VoterRecord:
    id: str
    group: str
    location: GeoPoint
    precinct: str | None = None
    assigned_site: str | None = None
    county: str | None = None


@dataclass(frozen=True)
class Site:
    id: str
    location: GeoPoint
    kind: str = "polling"

    def __post_init__(self):
        if self.kind not in SITE_KINDS:
            raise InvalidInputError(f"site kind {self.kind!r} not in {SITE_KINDS}")


@dataclass(frozen=True)
class VoterSchema:
    """Column names of a voter CSV. ``None`` marks an optional column as absent."""

    id: str = "id"
    group: str = "group"
    lat: str = "lat"
    lon: str = "lon"
    precinct: str | None = "precinct"
    site_id: str | None = "site_id"
    county: str | None = "county"

    @property
    def required(self) -> tuple[str, ...]:
        return (self.id, self.group, self.lat, self.lon)


DEFAULT_SCHEMA = VoterSchema()


@dataclass
class GroupedDataset:
    """Weighted points split into ``m`` disjoint groups plus candidate facilities.

    ``group_index[i]`` is the group of point ``i``; every point belongs to
    exactly one group by construction.
    """

    coords: np.ndarray
    group_index: np.ndarray
    labels: list[str]
    facilities: np.ndarray
    metric: Metric
    weights: np.ndarray | None = None
    k: int | None = None
    point_ids: list[str] | None = None
    facility_ids: list[str] | None = None

    def __post_init__(self):
        self.coords = geo.as_points(self.coords, self.metric)
        self.facilities = geo.as_points(self.facilities, self.metric)
        self.group_index = np.asarray(self.group_index, dtype=np.int64)
        n = len(self.coords)
        if n == 0:
            raise InvalidInputError("dataset has no points")
        if self.group_index.shape != (n,):
            raise InvalidInputError("group_index must have one entry per point")
        m = len(self.labels)
        if m < 1:
            raise InvalidInputError("need at least one group")
        if len(set(self.labels)) != m:
            raise InvalidInputError("group labels must be distinct")
        if self.group_index.min() < 0 or self.group_index.max() >= m:
            raise InvalidInputError("a point is not assigned to any known group")
        if self.weights is None:
            self.weights = np.ones(n)
        else:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (n,) or not np.all(self.weights > 0):
                raise InvalidInputError("weights must be positive, one per point")
        if len(self.facilities) == 0:
            raise InvalidInputError("no candidate facilities")

    @classmethod
    def from_partition(cls, coords, parts: Sequence[Sequence[int]], labels, facilities, metric, **kw):
        """Build from explicit index sets; rejects points in zero or several groups."""
        n = len(np.asarray(coords).reshape(len(coords), -1))
        gi = np.full(n, -1, dtype=np.int64)
        for g, members in enumerate(parts):
            for i in members:
                if gi[i] != -1:
                    raise InvalidInputError(f"point {i} assigned to two groups")
                gi[i] = g
        if (gi < 0).any():
            raise InvalidInputError(f"points {np.flatnonzero(gi < 0).tolist()} assigned to no group")
        return cls(coords=coords, group_index=gi, labels=list(labels), facilities=facilities, metric=metric, **kw)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def m(self) -> int:
        return len(self.labels)

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group_index == g)

    def group_weights(self) -> np.ndarray:
        return np.bincount(self.group_index, weights=self.weights, minlength=self.m)

    def cost_matrix(self) -> np.ndarray:
        """Point-to-facility distances, shape ``(n, |F|)``."""
        return geo.pairwise_cost(self.coords, self.facilities, self.metric)

    def subset(self, idx) -> "GroupedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupedDataset(
            coords=self.coords[idx], group_index=self.group_index[idx], labels=list(self.labels),
            facilities=self.facilities, metric=self.metric, weights=self.weights[idx], k=self.k,
            point_ids=[self.point_ids[i] for i in idx] if self.point_ids else None,
            facility_ids=self.facility_ids,
        )


def dataset_from_voters(voters: Sequence[VoterRecord], facilities: Sequence[Site], metric: Metric,
                        labels: Sequence[str] | None = None) -> GroupedDataset:
    if not voters:
        raise InvalidInputError("no voters")
    if labels is None:
        labels = sorted({v.group for v in voters})
    pos = {g: i for i, g in enumerate(labels)}
    return GroupedDataset(
        coords=geo.points_array([v.location for v in voters]),
        group_index=np.array([pos[v.group] for v in voters]),
        labels=list(labels),
        facilities=geo.points_array([s.location for s in facilities]),
        metric=metric,
        point_ids=[v.id for v in voters],
        facility_ids=[s.id for s in facilities],
    )


# ---------------------------------------------------------------- CSV I/O


def _parse_coord(raw: str | None, lo: float, hi: float) -> float | None:
    if raw is None or raw.strip() == "":
        return None
    try:
        val = float(raw)
    except ValueError:
        return None
    if math.isnan(val) or not lo <= val <= hi:
        return None
    return val


def _opt(row: dict, col: str | None) -> str | None:
    if col is None or col not in row:
        return None
    val = row[col]
    return val if val not in (None, "") else None


def load_voters(path, schema: VoterSchema = DEFAULT_SCHEMA) -> tuple[list[VoterRecord], dict[str, int]]:
    """Read a voter CSV.

    Rows whose coordinates do not parse are dropped, never imputed. Returns the
    records and a per-group count of dropped rows.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InvalidInputError(f"{path}: empty file")
        missing = [c for c in schema.required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}")
        records: list[VoterRecord] = []
        drops: Counter = Counter()
        seen: set[str] = set()
        for row in reader:
            vid = row[schema.id]
            group = row[schema.group]
            if not group:
                raise InvalidInputError(f"{path}: voter {vid!r} has an empty group")
            if vid in seen:
                raise InvalidInputError(f"{path}: duplicate voter id {vid!r}")
            seen.add(vid)
            lat = _parse_coord(row[schema.lat], -90.0, 90.0)
            lon = _parse_coord(row[schema.lon], -180.0, 180.0)
            if lat is None or lon is None:
                drops[group] += 1
                continue
            records.append(VoterRecord(
                id=vid, group=group, location=GeoPoint(lat, lon),
                precinct=_opt(row, schema.precinct), assigned_site=_opt(row, schema.site_id),
                county=_opt(row, schema.county),
            ))
    if not records and not drops:
        raise InvalidInputError(f"{path}: no voter rows")
    return records, dict(sorted(drops.items()))


def write_voters(records: Sequence[VoterRecord], path, schema: VoterSchema = DEFAULT_SCHEMA) -> None:
    cols = [schema.id, schema.group, schema.lat, schema.lon]
    optional = [(schema.precinct, "precinct"), (schema.site_id, "assigned_site"), (schema.county, "county")]
    cols += [c for c, _ in optional if c is not None]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = [r.id, r.group, repr(r.location.lat), repr(r.location.lon)]
            row += [getattr(r, attr) or "" for c, attr in optional if c is not None]
            w.writerow(row)


def load_sites(path) -> list[Site]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InvalidInputError(f"{path}: empty file")
        missing = [c for c in ("id", "kind", "lat", "lon") if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}")
        sites = []
        for row in reader:
            lat = _parse_coord(row["lat"], -90.0, 90.0)
            lon = _parse_coord(row["lon"], -180.0, 180.0)
            if lat is None or lon is None:
                raise InvalidInputError(f"{path}: site {row['id']!r} has invalid coordinates")
            sites.append(Site(row["id"], GeoPoint(lat, lon), row["kind"]))
    if not sites:
        raise InvalidInputError(f"{path}: no site rows")
    ids = [s.id for s in sites]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"{path}: duplicate site ids")
    return sites


def write_sites(sites: Sequence[Site], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "kind", "lat", "lon"])
        for s in sites:
            w.writerow([s.id, s.kind, repr(s.location.lat), repr(s.location.lon)])


def load_assignment(path) -> dict[str, str]:
    """Two-column CSV ``voter_id,site_id``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InvalidInputError(f"{path}: empty file")
        if not {"voter_id", "site_id"} <= set(reader.fieldnames):
            raise SchemaError(f"{path}: needs voter_id and site_id columns")
        return {row["voter_id"]: row["site_id"] for row in reader}


def write_assignment(assignment: dict[str, str], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voter_id", "site_id"])
        for vid, sid in assignment.items():
            w.writerow([vid, sid])


# ------------------------------------------------------- synthetic states


@dataclass(frozen=True)
class Region:
    """A Gaussian blob of voters. ``weight`` is the region's relative share of voters."""

    name: str
    lat: float
    lon: float
    spread_miles: float
    weight: float
    mix: dict[str, float]
    site_bias: float = 1.0


@dataclass(frozen=True)
class SynthConfig:
    n_voters: int
    regions: tuple[Region, ...]
    n_sites: int = 40
    n_schools: int = 120
    n_libraries: int = 30
    group_site_bias: dict[str, float] = field(default_factory=dict)

    @property
    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.regions:
            for g in r.mix:
                seen.setdefault(g)
        return list(seen)


def default_synth_config(n_voters: int = 100_000, n_sites: int = 40) -> SynthConfig:
    """Four-region reference state: two cities and two rural areas with differing group mixes."""
    regions = (
        Region("metro_north", 28.55, -81.38, 6.0, 0.40, {"A": 0.70, "B": 0.15, "C": 0.15}),
        Region("metro_south", 27.95, -82.46, 5.0, 0.30, {"A": 0.30, "B": 0.45, "C": 0.25}),
        Region("rural_east", 27.40, -80.90, 18.0, 0.18, {"A": 0.80, "B": 0.10, "C": 0.10}),
        Region("rural_west", 26.90, -81.90, 15.0, 0.12, {"A": 0.35, "B": 0.20, "C": 0.45}),
    )
    return SynthConfig(n_voters=n_voters, regions=regions, n_sites=n_sites,
                       n_schools=3 * n_sites, n_libraries=max(1, n_sites // 2),
                       group_site_bias={"A": 1.0, "B": 0.35, "C": 0.5})


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    raw = shares / shares.sum() * total
    base = np.floor(raw).astype(np.int64)
    rem = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return base


def _offset(rng, lat, lon, spread, size):
    dy = rng.normal(0.0, spread, size)
    dx = rng.normal(0.0, spread, size)
    lats = np.clip(lat + dy / 69.0, -89.9, 89.9)
    lons = lon + dx / (69.0 * np.cos(np.radians(lats)))
    lons = (lons + 180.0) % 360.0 - 180.0
    return lats, lons


def synth_state(seed: int, config: SynthConfig) -> tuple[list[VoterRecord], list[Site]]:
    """Generate a seeded synthetic state.

    Polling sites are drawn from voter locations with per-group and per-region
    bias so that group/geography correlation, and therefore access disparity,
    is controllable. Each voter's precinct is its nearest polling site.
    """
    groups = config.groups
    if not config.regions:
        raise InvalidInputError("need at least one region")
    if config.n_voters < max(1, len(groups)):
        raise InvalidInputError("n_voters must be >= number of groups >= 1")
    for r in config.regions:
        if abs(sum(r.mix.values()) - 1.0) > 1e-9:
            raise InvalidInputError(f"group mix of region {r.name} does not sum to 1")
        if r.weight <= 0 or r.spread_miles <= 0:
            raise InvalidInputError(f"region {r.name} needs positive weight and spread")
    if config.n_sites < 1:
        raise InvalidInputError("need at least one polling site")

    rng = np.random.default_rng(seed)
    counts = _largest_remainder(config.n_voters, np.array([r.weight for r in config.regions]))
    lat_all, lon_all, grp_all, county_all = [], [], [], []
    for r, cnt in zip(config.regions, counts):
        lats, lons = _offset(rng, r.lat, r.lon, r.spread_miles, cnt)
        labels = list(r.mix)
        probs = np.array([r.mix[g] for g in labels])
        pick = rng.choice(len(labels), size=cnt, p=probs / probs.sum())
        lat_all.append(lats)
        lon_all.append(lons)
        grp_all.extend(labels[i] for i in pick)
        county_all.extend([r.name] * cnt)
    lat = np.concatenate(lat_all)
    lon = np.concatenate(lon_all)
    coords = np.column_stack([lat, lon])

    bias = np.array([config.group_site_bias.get(g, 1.0) for g in grp_all])
    region_bias = np.repeat([r.site_bias for r in config.regions], counts)
    p = bias * region_bias
    site_idx = rng.choice(len(coords), size=config.n_sites, replace=False, p=p / p.sum())
    slat, slon = _offset(rng, lat[site_idx], lon[site_idx], 0.3, config.n_sites)
    polling = [Site(f"S{i:04d}", GeoPoint(float(a), float(b)), "polling") for i, (a, b) in enumerate(zip(slat, slon))]

    def _reference(kind, prefix, count):
        if count <= 0:
            return []
        idx = rng.choice(len(coords), size=count, replace=False)
        a, b = _offset(rng, lat[idx], lon[idx], 0.5, count)
        return [Site(f"{prefix}{i:04d}", GeoPoint(float(x), float(y)), kind) for i, (x, y) in enumerate(zip(a, b))]

    schools = _reference("school", "SCH", config.n_schools)
    libraries = _reference("library", "LIB", config.n_libraries)

    nearest_site, _ = geo.nearest(coords, np.column_stack([slat, slon]), geo.haversine())
    voters = [
        VoterRecord(
            id=f"V{i:07d}", group=grp_all[i], location=GeoPoint(float(lat[i]), float(lon[i])),
            precinct=f"P{nearest_site[i]:04d}", assigned_site=polling[nearest_site[i]].id, county=county_all[i],
        )
        for i in range(len(coords))
    ]
    return voters, polling + schools + libraries


# ------------------------------------------------- adversarial instances


def integrality_gap_instance(m: int, D: float) -> GroupedDataset:
    """``m`` singleton groups at pairwise distance ``D`` with ``k = m - 1``."""
    if m < 2:
        raise InvalidInputError("integrality gap instance needs m >= 2")
    if not D > 0:
        raise InvalidInputError("D must be positive")
    mat = np.full((m, m), float(D))
    np.fill_diagonal(mat, 0.0)
    idx = np.arange(m).reshape(-1, 1)
    return GroupedDataset(coords=idx, group_index=np.arange(m), labels=[f"X{i + 1}" for i in range(m)],
                          facilities=idx, metric=geo.explicit(mat), k=m - 1)


@dataclass(frozen=True)
class TrapLayout:
    """Point indices of the local-search trap instance."""

    a1: int
    A2: tuple[int, ...]
    b1: int
    B2: tuple[int, ...]


def local_search_trap_instance(t: int, d: float, eps: float, M: float | None = None
                               ) -> tuple[GroupedDataset, TrapLayout]:
    """Two far-apart clusters ``A = {a1} + A2`` and ``B = {b1} + B2`` with crossed groups.

    Groups are ``X1 = {a1} + B2`` and ``X2 = {b1} + A2``; ``k = 2``. ``M``
    defaults to ``1e6 * t * d``.
    """
    if t < 1:
        raise InvalidInputError("t must be >= 1")
    if M is None:
        M = 1e6 * t * d
    if not (0 < eps < d < M):
        raise InvalidInputError("need 0 < eps < d < M")
    n = 2 * (t + 1)
    a1, b1 = 0, t + 1
    A2 = tuple(range(1, t + 1))
    B2 = tuple(range(t + 2, n))
    mat = np.full((n, n), float(M))
    for one, many in ((a1, A2), (b1, B2)):
        block = np.ix_(many, many)
        mat[block] = eps
        mat[one, list(many)] = d
        mat[list(many), one] = d
    np.fill_diagonal(mat, 0.0)
    gi = np.empty(n, dtype=np.int64)
    gi[[a1, *B2]] = 0
    gi[[b1, *A2]] = 1
    idx = np.arange(n).reshape(-1, 1)
    ds = GroupedDataset(coords=idx, group_index=gi, labels=["X1", "X2"], facilities=idx,
                        metric=geo.explicit(mat), k=2)
    return ds, TrapLayout(a1, A2, b1, B2)
