import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from spgroup.data import FeatureSet, SuperpointPartition
from spgroup.kmeans import KMeansConfig
from spgroup.spectral import (GlobalPatternGrouping, build_global_graph, eigendecompose, expand_labels_to_points, gft,
                              group_patterns, inverse_gft, normalized_laplacian, stack_superpoint_features,
                              superpoint_pseudo_labels)


def random_orthonormal(s, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(s, s)))
    return q


class TestGraph:
    def test_identical_features_weight_one(self):
        g = build_global_graph(np.array([[1.0, 2.0], [1.0, 2.0]]))
        np.testing.assert_array_equal(g.adjacency, np.ones((2, 2)))

    def test_unit_distance_weight(self):
        g = build_global_graph(np.array([[0.0, 0.0], [0.6, 0.8]]))
        assert g.adjacency[0, 1] == pytest.approx(np.exp(-1.0), rel=1e-15)
        assert g.adjacency[0, 1] == pytest.approx(0.367879, abs=1e-6)

    def test_invalid_row_named(self):
        fs = FeatureSet(np.zeros((3, 2)), np.array([True, False, True]))
        with pytest.raises(ValueError, match="scene 'b', superpoint 4"):
            build_global_graph(fs, node_index=[("a", 0), ("b", 4), ("b", 5)])

    def test_symmetric_and_positive(self):
        x = np.random.default_rng(0).normal(size=(30, 5))
        a = build_global_graph(x).adjacency
        np.testing.assert_array_equal(a, a.T)
        assert (a > 0).all() and (a <= 1).all()


class TestLaplacian:
    def test_two_identical_nodes(self):
        lap = normalized_laplacian(build_global_graph(np.zeros((2, 3))))
        np.testing.assert_allclose(lap, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)

    def test_single_node(self):
        np.testing.assert_array_equal(normalized_laplacian(build_global_graph(np.zeros((1, 4)))), [[0.0]])

    def test_exactly_symmetric(self):
        lap = normalized_laplacian(build_global_graph(np.random.default_rng(1).normal(size=(50, 8))))
        assert np.array_equal(lap, lap.T)


class TestEigen:
    def test_closed_form_two_by_two(self):
        lam, u = eigendecompose(np.array([[0.5, -0.5], [-0.5, 0.5]]))
        np.testing.assert_allclose(lam, [0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(u[:, 0], [1 / np.sqrt(2)] * 2, atol=1e-15)
        np.testing.assert_allclose(np.abs(u[:, 1]), [1 / np.sqrt(2)] * 2, atol=1e-15)
        assert u[np.argmax(np.abs(u[:, 1])), 1] > 0

    def test_diagonal(self):
        d = np.array([0.7, 0.1, 1.9, 0.4])
        lam, u = eigendecompose(np.diag(d))
        np.testing.assert_array_equal(lam, np.sort(d))
        np.testing.assert_array_equal(u, np.eye(4)[:, np.argsort(d)])

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            eigendecompose(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_sign_convention(self):
        lap = normalized_laplacian(build_global_graph(np.random.default_rng(2).normal(size=(40, 3))))
        _, u = eigendecompose(lap)
        idx = np.argmax(np.abs(u), axis=0)
        assert (u[idx, np.arange(40)] > 0).all()


class TestTransform:
    def test_equal_features_concentrate_on_dc(self):
        c = np.array([3.0, -1.0, 0.5])
        f = np.tile(c, (2, 1))
        _, u = eigendecompose(normalized_laplacian(build_global_graph(f)))
        freq = gft(u, f)
        np.testing.assert_allclose(freq[0], c * np.sqrt(2), atol=1e-14)
        np.testing.assert_allclose(freq[1], 0.0, atol=1e-14)

    def test_identity_basis(self):
        f = np.random.default_rng(3).normal(size=(6, 2))
        np.testing.assert_array_equal(gft(np.eye(6), f), f)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gft(np.eye(3), np.zeros((4, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 80), st.integers(1, 16))
    def test_round_trip_and_parseval(self, seed, s, d):
        f = np.random.default_rng(seed).normal(size=(s, d))
        _, u = eigendecompose(normalized_laplacian(build_global_graph(f)))
        freq = gft(u, f)
        assert np.abs(inverse_gft(u, freq) - f).max() <= 1e-6
        assert abs(np.sum(freq ** 2) - np.sum(f ** 2)) <= 1e-9 * np.sum(f ** 2)


class TestPatterns:
    def test_s_prime_equals_s_returns_basis(self):
        u = random_orthonormal(7, 0)
        freq = np.random.default_rng(0).normal(size=(7, 3))
        assign, v = group_patterns(u, freq, 7)
        np.testing.assert_array_equal(assign, np.arange(7))
        np.testing.assert_array_equal(v, u)

    def test_single_group_is_column_mean(self):
        u = random_orthonormal(5, 1)
        assign, v = group_patterns(u, np.ones((5, 2)), 1)
        np.testing.assert_array_equal(assign, 0)
        np.testing.assert_allclose(v[:, 0], u.mean(axis=1), atol=1e-15)

    def test_three_blobs(self):
        rng = np.random.default_rng(2)
        u = random_orthonormal(12, 2)
        blob = rng.permutation(np.repeat([0, 1, 2], 4))
        centers = np.array([[0.0, 0, 0, 0], [50, 0, 0, 0], [0, 50, 50, 0]])
        freq = centers[blob] + rng.normal(scale=0.01, size=(12, 4))
        assign, v = group_patterns(u, freq, 3, KMeansConfig(3, restarts=5))
        # relabel blobs by first eigen-index, as the implementation does
        order = {b: i for i, b in enumerate(dict.fromkeys(blob.tolist()))}
        np.testing.assert_array_equal(assign, [order[b] for b in blob])
        for g in range(3):
            np.testing.assert_allclose(v[:, g], u[:, assign == g].mean(axis=1), rtol=0, atol=1e-12)

    def test_s_prime_out_of_range(self):
        with pytest.raises(ValueError):
            group_patterns(np.eye(3), np.zeros((3, 1)), 4)


class TestPseudoLabels:
    def test_c_equals_s(self):
        v = np.random.default_rng(5).normal(size=(6, 3))
        assert sorted(superpoint_pseudo_labels(v, 6)) == list(range(6))

    def test_two_groups(self):
        v = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [1.0, 0], [0, 1.0]])
        lab = superpoint_pseudo_labels(v, 2)
        assert lab[0] == lab[1] == lab[3] != lab[2] == lab[4]


class TestExpand:
    def test_one_superpoint(self):
        out = expand_labels_to_points([3], [SuperpointPartition("a", np.zeros(5, dtype=int))])
        np.testing.assert_array_equal(out["a"], [3] * 5)

    def test_split(self):
        parts = [SuperpointPartition("a", [0, 1, 1, 0]), SuperpointPartition("b", [0, 0])]
        out = expand_labels_to_points([0, 1, 1], parts)
        np.testing.assert_array_equal(out["a"], [0, 1, 1, 0])
        np.testing.assert_array_equal(out["b"], [1, 1])

    def test_excluded_points(self):
        out = expand_labels_to_points([2], [SuperpointPartition("a", [0, 0, 0])],
                                      excluded={"a": np.array([False, True, False])})
        np.testing.assert_array_equal(out["a"], [2, -1, 2])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            expand_labels_to_points([0, 1], [SuperpointPartition("a", [0])])


def test_stack_keeps_scene_order():
    parts = [SuperpointPartition("a", [0, 1]), SuperpointPartition("b", [0])]
    fs, index = stack_superpoint_features([FeatureSet(np.eye(2)), FeatureSet(np.ones((1, 2)))], parts)
    assert index == [("a", 0), ("a", 1), ("b", 0)]
    np.testing.assert_array_equal(fs.values, [[1, 0], [0, 1], [1, 1]])


class TestEstimator:
    def test_fit_recovers_groups(self):
        rng = np.random.default_rng(7)
        means = rng.normal(scale=10, size=(3, 8))
        truth = np.repeat([0, 1, 2], 15)
        x = means[truth] + rng.normal(scale=0.05, size=(45, 8))
        # on a graph this small, extra high-frequency patterns only add per-node noise to V
        est = GlobalPatternGrouping(n_patterns=3, n_classes=3, keep_graph=True).fit(x)
        assert np.unique(np.stack([est.labels_, truth], 1), axis=0).shape[0] == 3
        assert est.eigenvalues_.shape == (45,)
        assert est.patterns_.shape == (45, 3)
        assert est.adjacency_.shape == (45, 45)
        assert est.basis_.s_prime == 3

    def test_clone(self):
        est = GlobalPatternGrouping(n_patterns=4, n_classes=2, bandwidth=0.5)
        assert clone(est).get_params() == est.get_params()

    def test_fit_predict_deterministic(self):
        x = np.random.default_rng(8).normal(size=(30, 4))
        a = GlobalPatternGrouping(n_patterns=6, n_classes=3).fit_predict(x)
        b = GlobalPatternGrouping(n_patterns=6, n_classes=3).fit_predict(x)
        np.testing.assert_array_equal(a, b)
