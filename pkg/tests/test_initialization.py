"""Starting-point constructions: deterministic values, vector round trips,
and k-means behavior against brute-force enumeration."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgssmix.initialization import (
    FewerPointsThanClusters,
    SeriesInitFailed,
    devectorize,
    identity_observation,
    init_identity,
    init_kmeans,
    init_random,
    kmeans_lloyd,
    param_vector_length,
    random_cluster,
    vectorize,
    _series_param_vectors,
)
from lgssmix.model import LgssmParams, TimeSeriesSample

from helpers import rand_params, rand_series
from oracles import best_two_partition_sse


class TestIdentityInit:
    def test_mean_levels_three_clusters(self):
        model = init_identity(3, 2, 1)
        np.testing.assert_array_equal(model.clusters[0].mu, [-1.0, -1.0])
        np.testing.assert_array_equal(model.clusters[1].mu, [0.0, 0.0])
        np.testing.assert_array_equal(model.clusters[2].mu, [1.0, 1.0])

    def test_mean_levels_single_cluster(self):
        model = init_identity(1, 3, 2)
        np.testing.assert_array_equal(model.clusters[0].mu, np.zeros(3))

    def test_shared_matrices(self):
        model = init_identity(2, 3, 2)
        for c in model.clusters:
            np.testing.assert_array_equal(c.A, -1.5 * np.eye(3))
            np.testing.assert_array_equal(c.Gamma, 0.1 * np.eye(3))
            np.testing.assert_array_equal(c.Sigma, 0.1 * np.eye(2))
            np.testing.assert_array_equal(c.P, 0.1 * np.eye(3))
        np.testing.assert_array_equal(model.pi, [0.5, 0.5])

    def test_observation_square(self):
        np.testing.assert_array_equal(identity_observation(3, 3), np.eye(3))

    def test_observation_wide_cycles_identity_columns(self):
        C = identity_observation(2, 3)
        np.testing.assert_array_equal(C, [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

    def test_observation_wide_two_extra(self):
        C = identity_observation(2, 5)
        np.testing.assert_array_equal(
            C, [[1.0, 0.0, 1.0, 0.0, 1.0], [0.0, 1.0, 0.0, 1.0, 0.0]])

    def test_observation_tall_cycles_identity_rows(self):
        C = identity_observation(3, 2)
        np.testing.assert_array_equal(C, [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])


class TestRandomInit:
    def test_shapes_and_ranges(self):
        model = init_random(3, 4, 2, seed=7)
        assert model.M == 3 and model.d == 4 and model.n == 2
        for c in model.clusters:
            assert np.all(c.mu >= 0.0) and np.all(c.mu < 1.0)
            off = c.A[~np.eye(4, dtype=bool)]
            np.testing.assert_array_equal(off, np.zeros(12))
            diag = np.diag(c.A)
            assert np.all(diag >= -1.9) and np.all(diag < -0.1)
            np.testing.assert_array_equal(c.C[0], np.ones(4))
            assert set(np.unique(c.C[1:])) <= {0.0, 1.0}
            for S, m in ((c.Gamma, 4), (c.Sigma, 2), (c.P, 4)):
                w = np.linalg.eigvalsh(S)
                assert w.min() >= 0.1 - 1e-12

    def test_reproducible(self):
        a = init_random(2, 3, 2, seed=11)
        b = init_random(2, 3, 2, seed=11)
        for ca, cb in zip(a.clusters, b.clusters):
            np.testing.assert_array_equal(ca.A, cb.A)
            np.testing.assert_array_equal(ca.mu, cb.mu)

    def test_seed_changes_draw(self):
        a = init_random(1, 3, 1, seed=0)
        b = init_random(1, 3, 1, seed=1)
        assert not np.array_equal(a.clusters[0].mu, b.clusters[0].mu)

    def test_cluster_draw_order_is_prefix_stable(self):
        rng1 = np.random.default_rng(5)
        first = random_cluster(rng1, 3, 2)
        rng2 = np.random.default_rng(5)
        again = random_cluster(rng2, 3, 2)
        np.testing.assert_array_equal(first.Gamma, again.Gamma)
        np.testing.assert_array_equal(first.P, again.P)


class TestParamVector:
    def test_length(self):
        assert param_vector_length(3, 2) == 3 + 9 + 6 + 12 + 3
        assert param_vector_length(1, 1) == 1 + 1 + 1 + 2 + 1

    def test_layout(self):
        theta = LgssmParams(
            mu=np.array([1.0, 2.0]),
            A=np.array([[3.0, 4.0], [5.0, 6.0]]),
            C=np.array([[7.0, 8.0]]),
            Gamma=np.array([[20.0, 1.0], [1.0, 30.0]]),
            Sigma=np.array([[40.0]]),
            P=np.array([[9.0, 0.5], [0.5, 10.0]]),
        )
        v = vectorize(theta)
        np.testing.assert_array_equal(
            v, [1, 2, 3, 4, 5, 6, 7, 8, 9, 0.5, 10, 20, 1, 30, 40])

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_exact(self, seed, d, n):
        rng = np.random.default_rng(seed)
        theta = rand_params(rng, d, n).floored()
        back = devectorize(vectorize(theta), d, n)
        for name in ("mu", "A", "C", "Gamma", "Sigma", "P"):
            np.testing.assert_array_equal(getattr(back, name),
                                          getattr(theta, name))

    def test_devectorize_floors_covariances(self):
        d, n = 2, 1
        v = np.zeros(param_vector_length(d, n))
        # P block gets a negative diagonal entry
        v[3 + 4 + 2] = -5.0
        theta = devectorize(v, d, n)
        assert np.linalg.eigvalsh(theta.P).min() >= 0.0

    def test_wrong_length_raises(self):
        with pytest.raises(Exception):
            devectorize(np.zeros(4), 2, 1)


class TestLloyd:
    def test_two_blobs_match_brute_force(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(6, 2)) * 0.2 + np.array([0.0, 0.0])
        b = rng.normal(size=(6, 2)) * 0.2 + np.array([8.0, 8.0])
        points = np.vstack([a, b])
        labels, centers = kmeans_lloyd(points, 2, seed=0)
        got = frozenset(
            [frozenset(np.flatnonzero(labels == m).tolist()) for m in (0, 1)])
        _, best_mask = best_two_partition_sse(points)
        want = frozenset([
            frozenset(np.flatnonzero(best_mask).tolist()),
            frozenset(np.flatnonzero(~best_mask).tolist()),
        ])
        assert got == want

    def test_labels_cover_all_clusters(self):
        rng = np.random.default_rng(9)
        points = rng.normal(size=(20, 3))
        labels, centers = kmeans_lloyd(points, 4, seed=1)
        assert set(labels.tolist()) == {0, 1, 2, 3}
        assert centers.shape == (4, 3)

    def test_identical_points_spread_one_per_cluster(self):
        points = np.ones((3, 5))
        labels, centers = kmeans_lloyd(points, 3, seed=0)
        assert sorted(labels.tolist()) == [0, 1, 2]
        np.testing.assert_array_equal(centers, np.ones((3, 5)))

    def test_centers_are_member_means(self):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(15, 2))
        labels, centers = kmeans_lloyd(points, 3, seed=2)
        for m in range(3):
            member = points[labels == m]
            np.testing.assert_allclose(centers[m], member.mean(axis=0),
                                       rtol=0, atol=1e-12)

    def test_fewer_points_than_clusters(self):
        with pytest.raises(FewerPointsThanClusters):
            kmeans_lloyd(np.zeros((2, 3)), 5, seed=0)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(12)
        points = rng.normal(size=(30, 4))
        la, ca = kmeans_lloyd(points, 3, seed=7)
        lb, cb = kmeans_lloyd(points, 3, seed=7)
        np.testing.assert_array_equal(la, lb)
        np.testing.assert_array_equal(ca, cb)


def _toy_dataset(seed, n_series=6, d=1, n=1):
    """Short well-behaved series drawn from two far-apart regimes."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_series):
        level = 0.0 if i < n_series // 2 else 30.0
        t = np.cumsum(rng.uniform(0.5, 1.5, size=12))
        y = level + rng.normal(size=(12, n))
        out.append(TimeSeriesSample(id=f"s{i}", timestamps=t, observations=y))
    return out


class TestKmeansInit:
    def test_model_shape_and_shares(self):
        data = _toy_dataset(0)
        model = init_kmeans(data, M=2, d=1, restarts=2, seed=0)
        assert model.M == 2 and model.d == 1 and model.n == 1
        np.testing.assert_allclose(model.pi.sum(), 1.0, atol=1e-12)
        assert np.all(model.pi > 0)

    def test_separated_regimes_split_half_half(self):
        data = _toy_dataset(1)
        model = init_kmeans(data, M=2, d=1, restarts=3, seed=3)
        np.testing.assert_allclose(sorted(model.pi), [0.5, 0.5], atol=1e-12)
        levels = sorted(float(c.mu[0]) for c in model.clusters)
        assert levels[0] < 10.0 < levels[1]

    def test_deterministic_and_thread_invariant(self):
        data = _toy_dataset(2)
        a = init_kmeans(data, M=2, d=2, restarts=2, seed=5, threads=1)
        b = init_kmeans(data, M=2, d=2, restarts=2, seed=5, threads=3)
        np.testing.assert_array_equal(a.pi, b.pi)
        for ca, cb in zip(a.clusters, b.clusters):
            for name in ("mu", "A", "C", "Gamma", "Sigma", "P"):
                np.testing.assert_array_equal(getattr(ca, name),
                                              getattr(cb, name))

    def test_restart_streams_are_prefix_stable(self):
        data = _toy_dataset(3, n_series=3)
        p1, ll1 = _series_param_vectors(data, d=2, restarts=1, seed=9,
                                        tol=0.1, max_iter=50)
        p3, ll3 = _series_param_vectors(data, d=2, restarts=3, seed=9,
                                        tol=0.1, max_iter=50)
        # more restarts can only improve the winning log likelihood
        assert np.all(ll3 >= ll1 - 1e-9)

    def test_fewer_series_than_clusters(self):
        data = _toy_dataset(4, n_series=2)
        with pytest.raises(FewerPointsThanClusters):
            init_kmeans(data, M=3, d=1)
