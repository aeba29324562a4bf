import itertools

import numpy as np
import pytest

from fairpoll import baseline, dataset, geo
from fairpoll.dataset import GroupedDataset, Region, SchemaError, SynthConfig
from fairpoll.geo import InvalidInputError

HEADER = "id,group,lat,lon,precinct,site_id,county\n"


def _write(tmp_path, body, header=HEADER):
    p = tmp_path / "voters.csv"
    p.write_text(header + body, encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "a,A,27.0,-81.0,P1,S1,c\nb,B,27.1,-81.1,P1,S1,c\nc,A,27.2,-81.2,,,\n")
    recs, drops = dataset.load_voters(p)
    assert [r.id for r in recs] == ["a", "b", "c"]
    assert drops == {}
    assert recs[2].precinct is None and recs[2].assigned_site is None


def test_blank_latitude_dropped_and_counted(tmp_path):
    p = _write(tmp_path, "a,A,27.0,-81.0,P1,S1,c\nb,B,,-81.1,P1,S1,c\n")
    recs, drops = dataset.load_voters(p)
    assert len(recs) == 1 and drops == {"B": 1}


def test_out_of_range_coordinate_dropped(tmp_path):
    p = _write(tmp_path, "a,A,97.0,-81.0,P1,S1,c\nb,A,27.0,-81.0,P1,S1,c\n")
    recs, drops = dataset.load_voters(p)
    assert len(recs) == 1 and drops == {"A": 1}


def test_missing_column(tmp_path):
    p = _write(tmp_path, "a,A,27.0\n", header="id,group,lat\n")
    with pytest.raises(SchemaError):
        dataset.load_voters(p)


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("", encoding="utf-8")
    with pytest.raises(InvalidInputError, match="empty.csv"):
        dataset.load_voters(p)


def test_custom_schema(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("vid,race,y,x\n1,W,10,20\n", encoding="utf-8")
    schema = dataset.VoterSchema(id="vid", group="race", lat="y", lon="x", precinct=None, site_id=None, county=None)
    recs, _ = dataset.load_voters(p, schema)
    assert recs[0].group == "W" and recs[0].location.lon == 20.0


def test_roundtrip_bit_identical(tmp_path):
    voters, sites = dataset.synth_state(3, dataset.default_synth_config(1000, 10))
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    dataset.write_voters(voters, a)
    back, drops = dataset.load_voters(a)
    assert drops == {}
    assert back == voters
    dataset.write_voters(back, b)
    assert a.read_bytes() == b.read_bytes()
    dataset.write_sites(sites, tmp_path / "s.csv")
    assert dataset.load_sites(tmp_path / "s.csv") == sites


def test_synth_deterministic():
    cfg = dataset.default_synth_config(2000, 8)
    assert dataset.synth_state(1, cfg) == dataset.synth_state(1, cfg)
    assert dataset.synth_state(1, cfg) != dataset.synth_state(2, cfg)


def test_synth_single_group_mix():
    cfg = SynthConfig(500, (Region("r", 27.0, -81.0, 5.0, 1.0, {"A": 1.0}),), n_sites=5)
    voters, _ = dataset.synth_state(0, cfg)
    assert {v.group for v in voters} == {"A"}


def test_synth_region_ratio():
    cfg = SynthConfig(10_000, (Region("dense", 27.0, -81.0, 3.0, 10.0, {"A": 0.5, "B": 0.5}),
                               Region("sparse", 26.0, -82.0, 30.0, 1.0, {"A": 0.5, "B": 0.5})), n_sites=20)
    voters, _ = dataset.synth_state(5, cfg)
    dense = sum(v.county == "dense" for v in voters)
    ratio = dense / (len(voters) - dense)
    assert abs(ratio - 10.0) / 10.0 <= 0.15


def test_synth_bad_mix():
    cfg = SynthConfig(100, (Region("r", 27.0, -81.0, 5.0, 1.0, {"A": 0.5, "B": 0.4}),))
    with pytest.raises(InvalidInputError):
        dataset.synth_state(0, cfg)


def test_synth_precinct_is_nearest_site():
    voters, sites = dataset.synth_state(2, dataset.default_synth_config(500, 6))
    polling = [s for s in sites if s.kind == "polling"]
    pc = geo.points_array([s.location for s in polling])
    for v in voters[:50]:
        d = geo.pairwise_cost(v.location.as_array(), pc, geo.haversine())[0]
        assert polling[int(np.argmin(d))].id == v.assigned_site


def test_partition_rejects_overlap_and_gaps():
    pts = np.arange(4).reshape(-1, 1).astype(float)
    with pytest.raises(InvalidInputError):
        GroupedDataset.from_partition(pts, [[0, 1], [1, 2, 3]], ["a", "b"], pts, geo.euclidean(1))
    with pytest.raises(InvalidInputError):
        GroupedDataset.from_partition(pts, [[0, 1], [2]], ["a", "b"], pts, geo.euclidean(1))
    ds = GroupedDataset.from_partition(pts, [[0, 3], [1, 2]], ["a", "b"], pts, geo.euclidean(1))
    assert ds.group_index.tolist() == [0, 1, 1, 0]


def test_nonpositive_weight_rejected():
    pts = np.zeros((2, 2))
    with pytest.raises(InvalidInputError):
        GroupedDataset(pts, [0, 0], ["a"], pts, geo.euclidean(2), weights=[1.0, 0.0])


@pytest.mark.parametrize("m,D", [(2, 5.0), (3, 1.0), (4, 2.0), (5, 7.0)])
def test_gap_instance_integral_optimum_by_enumeration(m, D):
    ds = dataset.integrality_gap_instance(m, D)
    assert ds.k == m - 1 and ds.m == m
    cost = ds.cost_matrix()
    assert np.array_equal(cost, D * (1 - np.eye(m)))
    best = min(max(cost[u, list(S)].min() for u in range(m)) for S in itertools.combinations(range(m), m - 1))
    assert best == D


def test_gap_instance_rejects_small_m():
    with pytest.raises(InvalidInputError):
        dataset.integrality_gap_instance(1, 1.0)


def _trap_matrix_oracle(t, d, eps, M):
    n = 2 * t + 2
    side = np.array([0] * (t + 1) + [1] * (t + 1))
    hub = np.zeros(n, dtype=bool)
    hub[[0, t + 1]] = True
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                out[i, j] = 0
            elif side[i] != side[j]:
                out[i, j] = M
            elif hub[i] or hub[j]:
                out[i, j] = d
            else:
                out[i, j] = eps
    return out


def test_trap_instance_matrix_and_symmetry():
    t, d, eps = 4, 1.0, 0.01
    ds, lay = dataset.local_search_trap_instance(t, d, eps)
    M = 1e6 * t * d
    assert np.array_equal(ds.metric.matrix, _trap_matrix_oracle(t, d, eps, M))
    # swapping A and B relabels the groups and leaves the matrix unchanged
    perm = [lay.b1, *lay.B2, lay.a1, *lay.A2]
    assert np.array_equal(ds.metric.matrix[np.ix_(perm, perm)], ds.metric.matrix)
    assert np.array_equal(ds.group_index[perm], 1 - ds.group_index)


def test_trap_instance_objectives():
    t, d, eps = 10, 1.0, 0.01
    ds, lay = dataset.local_search_trap_instance(t, d, eps)
    cost = ds.cost_matrix()
    trap = baseline.assign(cost, [lay.a1, lay.b1], ds.weights, ds.group_index, ds.m)
    assert np.allclose(trap.group_cost, [t * d, t * d])
    opt = baseline.assign(cost, [lay.A2[0], lay.B2[0]], ds.weights, ds.group_index, ds.m)
    # any A2 and B2 point: each group pays d for its hub plus eps for the other t-1 points
    assert np.allclose(opt.group_cost, d + (t - 1) * eps)
    assert opt.group_cost.max() <= t * eps + d
    best, _ = baseline.exhaustive_best(cost, 2, ds.weights, ds.group_index, ds.m, baseline.FAIR)
    assert best == pytest.approx(opt.fair_objective, rel=1e-12)
    assert (t * d) / (t * eps + d) == pytest.approx(10 / 1.1, rel=1e-12)


def test_trap_instance_parameter_order():
    with pytest.raises(InvalidInputError):
        dataset.local_search_trap_instance(3, 1.0, 2.0)
    with pytest.raises(InvalidInputError):
        dataset.local_search_trap_instance(0, 1.0, 0.1)
