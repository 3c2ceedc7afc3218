import numpy as np
import pytest

from stn3d.neighborhood import (
    AffinityGraph,
    InsufficientPointsError,
    graph_from_text,
    graph_to_text,
    knn_graph,
    knn_oracle,
    pairwise_sq_dist,
)

THREE_POINTS = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2, 0]]).T


class TestPairwiseSqDist:
    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(
            pairwise_sq_dist(THREE_POINTS),
            [[0.0, 1.0, 4.0], [1.0, 0.0, 5.0], [4.0, 5.0, 0.0]])

    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(0)
        d = pairwise_sq_dist(rng.normal(size=(3, 40)))
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), np.zeros(40))

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=(3, 64))
        naive = np.zeros((64, 64))
        for i in range(64):
            for j in range(64):
                diff = g[:, i] - g[:, j]
                naive[i, j] = float(diff @ diff)
        assert np.abs(pairwise_sq_dist(g) - naive).max() < 1e-12

    def test_non_finite_rejected(self):
        bad = THREE_POINTS.copy()
        bad[0, 0] = np.inf
        with pytest.raises(ValueError):
            pairwise_sq_dist(bad)


class TestKnnGraph:
    def test_three_point_cloud(self):
        np.testing.assert_array_equal(knn_graph(THREE_POINTS, 1).idx, [[1], [0], [0]])

    def test_unit_square_tie_break(self):
        corners = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]]).T
        graph = knn_graph(corners, 2)
        np.testing.assert_array_equal(graph.idx, [[1, 2], [0, 3], [0, 3], [1, 2]])

    def test_no_self_and_no_duplicates(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(3, 50))
        graph = knn_graph(g, 7)
        for i, row in enumerate(graph.idx):
            assert i not in row
            assert len(set(row.tolist())) == 7

    def test_rows_sorted_by_distance_then_index(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=(3, 40))
        d = pairwise_sq_dist(g)
        graph = knn_graph(g, 6)
        for i, row in enumerate(graph.idx):
            keys = [(d[i, j], j) for j in row]
            assert keys == sorted(keys)

    def test_k_out_of_range(self):
        with pytest.raises(InsufficientPointsError):
            knn_graph(THREE_POINTS, 3)
        with pytest.raises(InsufficientPointsError):
            knn_graph(THREE_POINTS, 0)

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            n = int(rng.integers(4, 128))
            k = int(rng.integers(1, n))
            g = rng.normal(size=(3, n))
            assert knn_graph(g, k) == knn_oracle(g, k)

    def test_matches_oracle_with_engineered_ties(self):
        # regular grid: many exactly-equal distances at selection boundaries
        xs, ys = np.meshgrid(np.arange(5.0), np.arange(5.0))
        grid = np.stack([xs.ravel(), ys.ravel(), np.zeros(25)])
        for k in (1, 2, 3, 4, 8, 12):
            assert knn_graph(grid, k) == knn_oracle(grid, k)

    def test_monotonicity_in_k(self):
        rng = np.random.default_rng(5)
        g = rng.normal(size=(3, 60))
        full = knn_graph(g, 12)
        for k in (1, 3, 7):
            np.testing.assert_array_equal(knn_graph(g, k).idx, full.idx[:, :k])

    def test_permutation_free_rigid_and_scaling_invariance(self):
        from stn3d.geometry import apply_rigid, random_rigid
        rng = np.random.default_rng(6)
        g = rng.normal(size=(3, 45))
        base = knn_graph(g, 5)
        r, t = random_rigid(0)
        assert knn_graph(apply_rigid(g.T, r, t).T, 5) == base
        assert knn_graph(3.7 * g + 0.1, 5) == base


class TestGraphText:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        graph = knn_graph(rng.normal(size=(3, 20)), 4)
        assert graph_from_text(graph_to_text(graph)) == graph

    def test_one_line_per_point(self):
        graph = AffinityGraph(np.array([[1, 2], [0, 2], [0, 1]]))
        assert graph_to_text(graph) == "1 2\n0 2\n0 1\n"
