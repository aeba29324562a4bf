"""Distance kernels and the metric abstraction shared by every other module.

Points are plain numpy rows. For the haversine kernel a row is ``(lat, lon)``
in degrees; for the Euclidean kernels a row has ``dim`` coordinates; for the
explicit-matrix kernel a row is a single integer index into the matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

EARTH_RADIUS_MILES = 3958.8

HAVERSINE = "haversine"
EUCLIDEAN = "euclidean"
SQEUCLIDEAN = "sqeuclidean"
MATRIX = "matrix"

_KINDS = (HAVERSINE, EUCLIDEAN, SQEUCLIDEAN, MATRIX)


class InvalidInputError(ValueError):
    """Raised when inputs violate a documented precondition."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if math.isnan(self.lat) or math.isnan(self.lon):
            raise InvalidInputError("NaN coordinate")
        if not -90.0 <= self.lat <= 90.0:
            raise InvalidInputError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise InvalidInputError(f"longitude {self.lon} outside [-180, 180]")

    def as_array(self) -> np.ndarray:
        return np.array([self.lat, self.lon], dtype=float)


@dataclass(frozen=True, eq=False)
class Metric:
    """A distance kernel.

    Use the constructors :func:`haversine`, :func:`euclidean`,
    :func:`sq_euclidean` and :func:`explicit` rather than building this
    directly.
    """

    kind: str
    radius: float = EARTH_RADIUS_MILES
    dim: int = 2
    matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidInputError(f"unknown metric kind {self.kind!r}")
        if self.kind == HAVERSINE and not self.radius > 0:
            raise InvalidInputError("sphere radius must be positive")
        if self.kind in (EUCLIDEAN, SQEUCLIDEAN) and self.dim < 1:
            raise InvalidInputError("dimension must be >= 1")
        if self.kind == MATRIX:
            m = self.matrix
            if m is None or m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise InvalidInputError("explicit metric needs a square matrix")

    @property
    def is_metric(self) -> bool:
        """False for squared Euclidean: callers must not assume the triangle inequality."""
        return self.kind != SQEUCLIDEAN

    @property
    def point_dim(self) -> int:
        if self.kind == HAVERSINE:
            return 2
        if self.kind == MATRIX:
            return 1
        return self.dim

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == HAVERSINE:
            out["radius"] = self.radius
        elif self.kind == MATRIX:
            out["size"] = int(self.matrix.shape[0])
        else:
            out["dim"] = self.dim
        return out


def haversine(radius: float = EARTH_RADIUS_MILES) -> Metric:
    return Metric(HAVERSINE, radius=radius)


def euclidean(dim: int = 2) -> Metric:
    return Metric(EUCLIDEAN, dim=dim)


def sq_euclidean(dim: int = 2) -> Metric:
    return Metric(SQEUCLIDEAN, dim=dim)


def explicit(matrix) -> Metric:
    """Metric given by an explicit symmetric distance matrix over point indices."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError("explicit metric needs a square matrix")
    if not np.array_equal(m, m.T):
        raise InvalidInputError("explicit distance matrix must be symmetric")
    if np.any(np.diag(m) != 0) or np.any(m < 0):
        raise InvalidInputError("explicit distances must be non-negative with zero diagonal")
    return Metric(MATRIX, matrix=m)


def metric_from_name(name: str, radius: float = EARTH_RADIUS_MILES, dim: int = 2) -> Metric:
    if name == HAVERSINE:
        return haversine(radius)
    if name == EUCLIDEAN:
        return euclidean(dim)
    if name == SQEUCLIDEAN:
        return sq_euclidean(dim)
    raise InvalidInputError(f"metric {name!r} cannot be built by name")


def as_points(points, metric: Metric) -> np.ndarray:
    """Coerce ``points`` to a 2-D float array shaped for ``metric``."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if metric.kind != MATRIX else arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[1] != metric.point_dim:
        raise InvalidInputError(
            f"expected points with {metric.point_dim} coordinate(s) for {metric.kind}, got shape {arr.shape}"
        )
    if np.isnan(arr).any():
        raise InvalidInputError("NaN coordinate")
    return arr


def _haversine_block(a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    lat1 = np.radians(a[:, 0])[:, None]
    lat2 = np.radians(b[:, 0])[None, :]
    dlat = lat2 - lat1
    dlon = np.radians(b[:, 1])[None, :] - np.radians(a[:, 1])[:, None]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    np.clip(h, 0.0, 1.0, out=h)
    return 2.0 * radius * np.arcsin(np.sqrt(h))


def _sq_block(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _block(a: np.ndarray, b: np.ndarray, metric: Metric) -> np.ndarray:
    if metric.kind == HAVERSINE:
        return _haversine_block(a, b, metric.radius)
    if metric.kind == EUCLIDEAN:
        return np.sqrt(_sq_block(a, b))
    if metric.kind == SQEUCLIDEAN:
        return _sq_block(a, b)
    idx_a = a[:, 0].astype(np.int64)
    idx_b = b[:, 0].astype(np.int64)
    n = metric.matrix.shape[0]
    if idx_a.min(initial=0) < 0 or idx_b.min(initial=0) < 0 or idx_a.max(initial=0) >= n or idx_b.max(initial=0) >= n:
        raise InvalidInputError("point index outside the explicit distance matrix")
    return metric.matrix[np.ix_(idx_a, idx_b)]


def distance(a, b, metric: Metric) -> float:
    """Distance between two points under ``metric``."""
    pa = as_points(a, metric)
    pb = as_points(b, metric)
    if pa.shape[0] != 1 or pb.shape[0] != 1:
        raise InvalidInputError("distance() takes single points; use pairwise_cost for batches")
    if metric.kind == HAVERSINE:
        # order the pair so that d(a, b) and d(b, a) run the identical float ops
        if tuple(pb[0]) < tuple(pa[0]):
            pa, pb = pb, pa
    return float(_block(pa, pb, metric)[0, 0])


def pairwise_cost(points, centers, metric: Metric, block_rows: int = 4096) -> np.ndarray:
    """Full distance matrix, entry ``(i, j) = distance(points[i], centers[j])``.

    Rows are evaluated in blocks of ``block_rows`` to bound temporaries.
    """
    p = as_points(points, metric)
    c = as_points(centers, metric)
    if len(p) == 0 or len(c) == 0:
        raise InvalidInputError("pairwise_cost needs non-empty point and center lists")
    if len(p) <= block_rows:
        return _block(p, c, metric)
    out = np.empty((len(p), len(c)))
    for lo in range(0, len(p), block_rows):
        out[lo:lo + block_rows] = _block(p[lo:lo + block_rows], c, metric)
    return out


def iter_blocks(points, centers, metric: Metric, block_rows: int = 4096) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(row_offset, block)`` pieces of the distance matrix."""
    p = as_points(points, metric)
    c = as_points(centers, metric)
    if len(p) == 0 or len(c) == 0:
        raise InvalidInputError("empty input")
    # keep each block near 4M entries
    rows = max(1, min(block_rows, 4_000_000 // max(1, len(c))))
    for lo in range(0, len(p), rows):
        yield lo, _block(p[lo:lo + rows], c, metric)


def nearest(points, centers, metric: Metric) -> tuple[np.ndarray, np.ndarray]:
    """Index of and distance to the nearest center for each point (lowest index on ties)."""
    p = as_points(points, metric)
    idx = np.empty(len(p), dtype=np.int64)
    dist = np.empty(len(p))
    for lo, block in iter_blocks(p, centers, metric):
        j = np.argmin(block, axis=1)
        idx[lo:lo + len(block)] = j
        dist[lo:lo + len(block)] = block[np.arange(len(block)), j]
    return idx, dist


def paired_distance(a, b, metric: Metric) -> np.ndarray:
    """Row-wise distances ``d(a[i], b[i])``."""
    pa = as_points(a, metric)
    pb = as_points(b, metric)
    if pa.shape != pb.shape:
        raise InvalidInputError("paired_distance needs equally shaped inputs")
    if metric.kind == HAVERSINE:
        lat1, lat2 = np.radians(pa[:, 0]), np.radians(pb[:, 0])
        dlon = np.radians(pb[:, 1]) - np.radians(pa[:, 1])
        h = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
        return 2.0 * metric.radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    if metric.kind == MATRIX:
        return metric.matrix[pa[:, 0].astype(np.int64), pb[:, 0].astype(np.int64)]
    sq = np.einsum("ij,ij->i", pa - pb, pa - pb)
    return sq if metric.kind == SQEUCLIDEAN else np.sqrt(sq)


def points_array(points: Sequence[GeoPoint]) -> np.ndarray:
    return np.array([[p.lat, p.lon] for p in points], dtype=float).reshape(-1, 2)
