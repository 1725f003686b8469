import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spgroup.data import FeatureSet, SuperpointPartition
from spgroup.growing import grow_superpoints, growth_schedule, superpoint_mean_features
from spgroup.kmeans import KMeansConfig


def is_coarsening(fine, coarse):
    """Every fine superpoint lies inside exactly one coarse superpoint."""
    pairs = np.unique(np.stack([fine, coarse], axis=1), axis=0)
    return np.unique(pairs[:, 0]).size == pairs.shape[0]


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.unique(np.stack([a, b], 1), axis=0).shape[0] == np.unique(a).size == np.unique(b).size


@pytest.mark.parametrize("args, expected", [
    ((80, 40, 5), [80, 70, 60, 50, 40]),
    ((80, 80, 1), [80]),
    ((10, 3, 4), [10, 8, 6, 3]),
    ((5, 5, 3), [5, 5, 5]),
])
def test_schedule(args, expected):
    assert growth_schedule(*args) == expected


@pytest.mark.parametrize("args", [(80, 40, 1), (40, 80, 3), (10, 0, 2), (10, 5, 0)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        growth_schedule(*args)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(1, 500), st.integers(2, 20))
def test_schedule_shape(a, b, rounds):
    m1, mT = max(a, b), min(a, b)
    s = growth_schedule(m1, mT, rounds)
    assert len(s) == rounds and s[0] == m1 and s[-1] == mT
    assert all(x >= y for x, y in zip(s, s[1:]))


def test_mean_of_two_points():
    fs = superpoint_mean_features(FeatureSet(np.array([[1.0, 1.0], [3.0, 3.0]])), SuperpointPartition("s", [0, 0]))
    np.testing.assert_array_equal(fs.values, [[2.0, 2.0]])


def test_singleton_keeps_feature():
    x = np.array([[1.5, -2.0], [4.0, 0.25]])
    fs = superpoint_mean_features(FeatureSet(x), SuperpointPartition("s", [1, 0]))
    np.testing.assert_array_equal(fs.values, x[::-1])


def test_mean_matches_grouped_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 7))
    sp = rng.permutation(np.arange(200) % 10)
    fs = superpoint_mean_features(FeatureSet(x), SuperpointPartition("s", sp))
    oracle = np.array([x[sp == s].mean(axis=0) for s in range(10)])
    np.testing.assert_allclose(fs.values, oracle, rtol=0, atol=1e-12)


def test_invalid_points_skipped():
    x = np.array([[1.0], [100.0], [3.0], [7.0]])
    mask = np.array([True, False, True, False])
    fs = superpoint_mean_features(FeatureSet(x, mask), SuperpointPartition("s", [0, 0, 0, 1]))
    np.testing.assert_array_equal(fs.values[0], [2.0])
    np.testing.assert_array_equal(fs.valid_mask, [True, False])


def test_grow_pairs_identical_features():
    part = SuperpointPartition("s", [0, 0, 1, 2, 2, 3])
    feats = FeatureSet(np.array([[0.0, 0], [5, 5], [0, 0], [5, 5]]))
    grown = grow_superpoints(feats, part, 2)
    assert grown.n_superpoints == 2
    g = grown.history[-1]
    assert g[0] == g[2] and g[1] == g[3] and g[0] != g[1]
    assert grown.level == 1


def test_grow_clamp_is_identity():
    part = SuperpointPartition("s", [2, 0, 1, 1])
    grown = grow_superpoints(FeatureSet(np.eye(3)), part, 10)
    np.testing.assert_array_equal(grown.point_to_sp, part.point_to_sp)
    np.testing.assert_array_equal(grown.history[-1], [0, 1, 2])


def test_grow_recovers_blobs():
    rng = np.random.default_rng(4)
    centers = rng.normal(scale=20, size=(3, 6))
    blob = rng.permutation(np.repeat([0, 1, 2], 4))
    feats = FeatureSet(centers[blob] + rng.normal(scale=0.1, size=(12, 6)))
    part = SuperpointPartition("s", np.repeat(np.arange(12), 3))
    grown = grow_superpoints(feats, part, 3, KMeansConfig(3, restarts=5))
    assert same_partition(grown.history[-1], blob)


def test_invalid_superpoint_joins_nearest_group():
    part = SuperpointPartition("s", [0, 1, 2, 3])
    pos = np.array([[0.0, 0, 0], [10, 0, 0], [0.5, 0, 0], [9, 0, 0]])
    feats = FeatureSet(np.array([[0.0], [1.0], [0.0], [0.0]]), np.array([True, True, False, False]))
    grown = grow_superpoints(feats, part, 2, positions=pos)
    np.testing.assert_array_equal(grown.history[-1], [0, 1, 0, 1])
    with pytest.raises(ValueError, match="positions"):
        grow_superpoints(feats, part, 2)


def test_identical_features_keep_target_count():
    part = SuperpointPartition("s", np.arange(10))
    feats = FeatureSet(np.repeat([[0.0, 0.0], [1.0, 1.0]], 5, axis=0))
    assert grow_superpoints(feats, part, 4).n_superpoints == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 40), st.integers(1, 40))
def test_grown_is_coarsening(seed, m, target):
    rng = np.random.default_rng(seed)
    sp = np.concatenate([np.arange(m), rng.integers(0, m, size=3 * m)])
    part = SuperpointPartition("s", sp)
    grown = grow_superpoints(FeatureSet(rng.normal(size=(m, 3))), part, target)
    assert grown.n_superpoints == min(target, m)
    assert is_coarsening(part.point_to_sp, grown.point_to_sp)
    np.testing.assert_array_equal(grown.replay(part.point_to_sp), grown.point_to_sp)
