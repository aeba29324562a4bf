import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairpoll import coreset, dataset, geo
from fairpoll.geo import InvalidInputError

E2 = geo.euclidean(2)


def blobs(seed, n_per=150):
    rng = np.random.default_rng(seed)
    pts = np.vstack([rng.normal(0, 1, (n_per, 2)), rng.normal(4, 1.5, (n_per, 2))])
    gi = np.array([0] * n_per + [1] * n_per)
    rng.shuffle(gi)
    return dataset.GroupedDataset(pts, gi, ["a", "b"], pts, E2), rng


def test_bicriteria_small_n():
    pts = np.random.default_rng(0).random((3, 2))
    b = coreset.bicriteria_seed(pts, E2, 5, seed=0)
    assert b.centers.tolist() == [0, 1, 2] and b.cost() == 0.0


def test_bicriteria_covers_both_blobs():
    hits = 0
    rng = np.random.default_rng(1)
    pts = np.vstack([rng.normal(0, 0.1, (100, 2)), rng.normal(50, 0.1, (100, 2))])
    for seed in range(100):
        b = coreset.bicriteria_seed(pts, E2, 2, seed=seed)
        hits += (b.centers < 100).any() and (b.centers >= 100).any()
    assert hits >= 95


def test_bicriteria_cost_vs_exhaustive():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 13))
        pts = rng.random((n, 2))
        cost = geo.pairwise_cost(pts, pts, E2)
        opt = min(cost[:, list(S)].min(axis=1).sum() for S in itertools.combinations(range(n), 2))
        b = coreset.bicriteria_seed(pts, E2, 2, seed=seed)
        worst = max(worst, b.cost() / opt if opt > 0 else 0.0)
    assert worst <= 32


def test_bicriteria_deterministic():
    pts = np.random.default_rng(2).random((500, 2))
    a = coreset.bicriteria_seed(pts, E2, 3, seed=9)
    b = coreset.bicriteria_seed(pts, E2, 3, seed=9)
    assert np.array_equal(a.centers, b.centers)
    assert len(a.centers) <= 3 * 3 * int(np.ceil(np.log2(500 / 3))) + 3 * 3


def test_target_size_formula():
    assert coreset.target_size(200, 2, 0.2, 0.1) == int(np.ceil(10 / 0.04 * (2 * np.log(200) + np.log(10))))


def test_parameter_ranges():
    pts = np.zeros((4, 2))
    for eps, delta in ((0.0, 0.1), (1.0, 0.1), (0.5, 0.0), (0.5, 1.0)):
        with pytest.raises(InvalidInputError):
            coreset.fl_coreset(pts, E2, 1, eps, delta, seed=0)


def test_full_set_when_target_exceeds_n():
    pts = np.random.default_rng(3).random((50, 2))
    cs = coreset.fl_coreset(pts, E2, 2, 0.2, 0.1, seed=0)
    assert cs.provenance["exact"]
    assert np.array_equal(cs.coords, pts) and np.array_equal(cs.weights, np.ones(50))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 60), st.integers(1, 4))
def test_weight_conservation_per_group(seed, size, k):
    ds, _ = blobs(seed % 50, 80)
    ds.weights = np.random.default_rng(seed).uniform(0.5, 2.0, ds.n)
    cs = coreset.grouped_coreset(ds, k, 0.3, 0.1, seed, size=size)
    assert np.allclose(cs.group_weights(), ds.group_weights(), rtol=1e-6)
    assert np.all(cs.weights > 0)
    # every coreset point is one of the source points of its group
    assert np.array_equal(ds.coords[cs.source], cs.coords)
    assert np.array_equal(ds.group_index[cs.source], cs.group_index)


def test_trivial_coreset_exact_costs():
    ds, rng = blobs(4)
    cs = coreset.grouped_coreset(ds, 2, 0.2, 0.1, seed=0)
    assert all(cs.provenance["exact"])
    for _ in range(50):
        C = ds.coords[rng.choice(ds.n, 2, replace=False)]
        assert coreset.fair_cost(cs.coords, cs.weights, cs.group_index, 2, C, E2) == \
            coreset.fair_cost(ds.coords, ds.weights, ds.group_index, 2, C, E2)


def test_single_group_equals_fl_coreset():
    pts = np.random.default_rng(5).random((200, 2))
    ds = dataset.GroupedDataset(pts, np.zeros(200, dtype=int), ["all"], pts, E2)
    g = coreset.grouped_coreset(ds, 2, 0.3, 0.1, seed=7, size=40)
    f = coreset.fl_coreset(pts, E2, 2, 0.3, 0.1, seed=[7, 0], size=40)
    assert np.array_equal(g.coords, f.coords) and np.array_equal(g.weights, f.weights)


def test_fl_coreset_fidelity_n200():
    pts = np.random.default_rng(6).random((200, 2))
    rng = np.random.default_rng(60)
    sets = [pts[rng.choice(200, 2, replace=False)] for _ in range(50)]
    ds = dataset.GroupedDataset(pts, np.zeros(200, dtype=int), ["all"], pts, E2)
    for size in (None, 60):
        cs = coreset.fl_coreset(pts, E2, 2, 0.2, 0.1, seed=1, size=size)
        dev = coreset.relative_deviations(cs, ds, sets)
        assert (dev <= 0.2).mean() >= 0.9


def test_grouped_fidelity_two_groups():
    ds, rng = blobs(7)
    sets = [ds.coords[rng.choice(ds.n, 2, replace=False)] for _ in range(50)]
    cs = coreset.grouped_coreset(ds, 2, 0.2, 0.1, seed=3, size=40)
    assert not any(cs.provenance["exact"])
    assert coreset.relative_deviations(cs, ds, sets).max() <= 0.25


def test_median_deviation_monotone_in_size():
    ds, rng = blobs(8)
    sets = [ds.coords[rng.choice(ds.n, 2, replace=False)] for _ in range(50)]
    meds = []
    for s in (20, 40, 80):
        dev = np.concatenate([coreset.relative_deviations(coreset.grouped_coreset(ds, 2, 0.2, 0.1, sd, size=s),
                                                          ds, sets) for sd in range(20)])
        meds.append(np.median(dev))
    assert meds[0] >= meds[1] >= meds[2]


def test_certify_records_lower_sandwich():
    ds, _ = blobs(9)
    cs = coreset.grouped_coreset(ds, 2, 0.2, 0.1, seed=0, size=30)
    eps_obs = coreset.certify(cs, ds, n_sets=40, seed=1)
    assert cs.provenance["eps_observed"] == eps_obs
    rng = np.random.default_rng(1)
    for _ in range(40):
        C = ds.facilities[rng.choice(len(ds.facilities), 2, replace=False)]
        full = coreset.fair_cost(ds.coords, ds.weights, ds.group_index, 2, C, E2)
        core = coreset.fair_cost(cs.coords, cs.weights, cs.group_index, 2, C, E2)
        assert (1 - eps_obs) * full <= core * (1 + 1e-12)


def test_csv_roundtrip(tmp_path):
    ds, _ = blobs(10)
    cs = coreset.grouped_coreset(ds, 2, 0.2, 0.1, seed=0, size=30)
    coreset.write_coreset(cs, tmp_path / "c.csv")
    back = coreset.read_coreset(tmp_path / "c.csv", E2, labels=["a", "b"])
    assert np.array_equal(back.coords, cs.coords) and np.array_equal(back.weights, cs.weights)
    assert np.array_equal(back.group_index, cs.group_index) and np.array_equal(back.source, cs.source)
