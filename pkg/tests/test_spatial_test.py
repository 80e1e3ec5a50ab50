import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudssl.spatial_test import (InapplicableTest, PairedScores, bootstrap_pvalue,
                                   great_circle_km, knn_index, null_replicates, pvalue_from_null,
                                   sample_median, spatial_superiority_test, superiority_indicators)


def scores(w, seed=0):
    n = len(w)
    loc = np.random.default_rng(seed).uniform(-40, 40, (n, 2))
    z2 = np.zeros(n)
    return PairedScores(loc, z2 + np.asarray(w, float), z2)


def test_hand_case():
    sup = superiority_indicators(scores([1, 2, 3, 4, 5]))
    assert sup.median == 3.0
    assert sup.y.tolist() == [1, 1, 0, 0, 0]
    assert sup.proportion == pytest.approx(0.4)


def test_degenerate_is_inapplicable():
    with pytest.raises(InapplicableTest):
        superiority_indicators(scores([0.7] * 6))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=60, unique=True).filter(lambda v: len(v) % 2 == 0))
def test_even_n_gives_half_ones(w):
    sup = superiority_indicators(scores(w))
    assert sup.y.sum() == len(w) // 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=61, unique=True))
def test_floor_half_strictly_below_median(w):
    m = sample_median(np.array(w))
    assert sum(v < m for v in w) == len(w) // 2


def test_paired_scores_validation():
    with pytest.raises(ValueError):
        PairedScores(np.zeros((1, 2)), [1.0], [2.0])
    with pytest.raises(ValueError):
        PairedScores(np.zeros((2, 2)), [1.0, np.nan], [2.0, 1.0])
    with pytest.raises(ValueError):
        PairedScores(np.zeros((3, 2)), [1.0, 2.0], [2.0, 1.0])


def test_great_circle():
    assert great_circle_km(0, 0, 0, 0) == 0.0
    quarter = great_circle_km(0, 0, 0, 90)
    assert quarter == pytest.approx(np.pi / 2 * 6371.0)
    assert great_circle_km(45, 0, 45, 1) < great_circle_km(0, 0, 0, 1)


def test_knn_grid_disk():
    lat, lon = np.meshgrid(np.linspace(-10, 10, 50), np.linspace(-10, 10, 50), indexing="ij")
    loc = np.stack([lat.ravel(), lon.ravel()], 1)
    nn = knn_index(loc, k=60)
    i = 25 * 50 + 25
    d = great_circle_km(loc[i, 0], loc[i, 1], loc[:, 0], loc[:, 1])
    assert i not in nn[i]
    radius = d[nn[i]].max()
    others = np.setdiff1d(np.arange(len(loc)), np.append(nn[i], i))
    assert d[others].min() >= radius


def test_knn_all_others_and_warning():
    loc = np.random.default_rng(1).uniform(-5, 5, (12, 2))
    with pytest.warns(UserWarning):
        nn = knn_index(loc, k=50)
    assert nn.shape == (12, 11)
    for i in range(12):
        assert sorted(nn[i]) == [j for j in range(12) if j != i]


def test_knn_ties_by_index():
    loc = np.zeros((6, 2))
    nn = knn_index(loc, k=3)
    assert nn[0].tolist() == [1, 2, 3] and nn[4].tolist() == [0, 1, 2]


def test_pvalue_monotone_and_bounded():
    reps = np.random.default_rng(0).random(500)
    ps = [pvalue_from_null(reps, x) for x in np.linspace(-0.1, 1.1, 40)]
    assert all(0 < p <= 1 for p in ps)
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    assert pvalue_from_null(reps, 2.0) == pytest.approx(1 / 501)


def test_symmetric_null_half():
    rng = np.random.default_rng(3)
    loc = rng.uniform(-30, 30, (600, 2))
    sup = superiority_indicators(PairedScores(loc, rng.normal(size=600), rng.normal(size=600)))
    nn = knn_index(loc, 30)
    p = bootstrap_pvalue(sup.y, nn, 0.5, n_boot=2000, seed=1)
    assert abs(p - 0.5) < 3 / np.sqrt(2000)


def test_deterministic_in_seed():
    rng = np.random.default_rng(4)
    loc = rng.uniform(-30, 30, (300, 2))
    y = rng.integers(0, 2, 300)
    nn = knn_index(loc, 20)
    assert np.array_equal(null_replicates(y, nn, 200, 5), null_replicates(y, nn, 200, 5))
    assert not np.array_equal(null_replicates(y, nn, 200, 5), null_replicates(y, nn, 200, 6))


def test_small_n_boot_warns():
    with pytest.warns(UserWarning):
        null_replicates(np.array([0, 1, 1]), np.array([[1], [2], [0]]), n_boot=50)


def planted_field(n, rng):
    side = int(np.ceil(np.sqrt(n)))
    lat, lon = np.meshgrid(np.linspace(-40, 40, side), np.linspace(-40, 40, side), indexing="ij")
    loc = np.stack([lat.ravel(), lon.ravel()], 1)[:n]
    z2 = 5.0 + rng.normal(0, 1, n)
    return loc, z2


def test_planted_superiority_is_significant():
    rng = np.random.default_rng(7)
    loc, z2 = planted_field(5112, rng)
    z1 = z2 - 1.0 + rng.normal(0, 0.5, len(z2))
    rep = spatial_superiority_test(PairedScores(loc, z1, z2), k=1000, n_boot=2000, seed=0)
    assert rep["observed_proportion"] > 0.9
    assert rep["p_value"] < 0.001
    assert set(rep) == {"n", "k", "n_boot", "observed_proportion", "p_value", "seed"}


def null_rejection_rate(n_sims, n, k, alpha, correlated=False):
    rng = np.random.default_rng(11)
    side = int(np.sqrt(n))
    lat, lon = np.meshgrid(np.linspace(-30, 30, side), np.linspace(-30, 30, side), indexing="ij")
    loc = np.stack([lat.ravel(), lon.ravel()], 1)
    nn = knn_index(loc, k)
    rejections = 0
    for s in range(n_sims):
        z1, z2 = rng.normal(size=len(loc)), rng.normal(size=len(loc))
        if correlated:
            shared = rng.normal(size=len(loc))
            smooth = shared[nn[:, :8]].mean(axis=1) * 3
            z1 = z1 + smooth
            z2 = z2 + smooth[::-1]
        sup = superiority_indicators(PairedScores(loc, z1, z2))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = bootstrap_pvalue(sup.y, nn, sup.observed, n_boot=400, seed=s)
        rejections += p < alpha
    return rejections / n_sims


def test_null_calibration():
    assert null_rejection_rate(200, 400, 40, 0.05) <= 0.08


def test_null_conservative_under_spatial_correlation():
    assert null_rejection_rate(100, 400, 40, 0.05, correlated=True) <= 0.05 + 3 * np.sqrt(0.05 * 0.95 / 100)
