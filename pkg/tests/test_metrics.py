import numpy as np
import pytest

from stn3d.geometry import PointCloud, apply_rigid, random_rigid
from stn3d.metrics import (
    DegenerateSamplesError,
    accuracy,
    miou,
    neighborhood_std_stats,
    per_point_neighbor_std,
    welch_t_test,
)


class TestMiou:
    def test_perfect_prediction(self):
        labels = np.array([0, 1, 2, 0, 1])
        assert miou(labels, labels, 3) == 1.0

    def test_inverted_two_part_prediction(self):
        true = np.array([0, 0, 1, 1])
        assert miou(1 - true, true, 2) == 0.0

    def test_hand_counted_case(self):
        # part 0: pred {0,1} truth {0} -> 1/2; part 1: pred {2,3} truth {1,2,3} -> 2/3
        assert miou([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx(7.0 / 12.0)

    def test_absent_part_counts_as_one(self):
        # part 2 never appears on either side
        assert miou([0, 1], [0, 1], 3) == 1.0

    def test_point_order_invariance_and_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(3, 50))
            pred = rng.integers(0, 3, n)
            true = rng.integers(0, 3, n)
            value = miou(pred, true, 3)
            assert 0.0 <= value <= 1.0
            perm = rng.permutation(n)
            assert miou(pred[perm], true[perm], 3) == pytest.approx(value)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            miou([0, 1], [0, 1, 1], 2)

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            miou([0, 3], [0, 1], 2)

    def test_accuracy(self):
        assert accuracy([1, 2, 3], [1, 0, 3]) == pytest.approx(2.0 / 3.0)


class TestNeighborhoodStdStats:
    def test_identical_clouds_give_zero_reduction(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(60, 3))
        stats = neighborhood_std_stats(pts, pts.copy(), k=5)
        assert stats.reduction == 0.0
        assert stats.std_before == stats.std_after

    def test_uniform_scaling_gives_zero_reduction(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(60, 3))
        stats = neighborhood_std_stats(pts, 3.5 * pts, k=5)
        assert abs(stats.reduction) < 1e-12

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(50, 3))
        r, t = random_rigid(5)
        stats = neighborhood_std_stats(pts, apply_rigid(pts, r, t), k=4)
        assert abs(stats.reduction) < 1e-9

    def test_more_uniform_cloud_reduces_spread(self):
        rng = np.random.default_rng(4)
        clustered = np.vstack([rng.normal(scale=0.05, size=(40, 3)),
                               rng.normal(scale=1.0, size=(40, 3))])
        grid = np.stack(np.meshgrid(*[np.linspace(-1, 1, 5)] * 3), axis=-1).reshape(-1, 3)[:80]
        stats = neighborhood_std_stats(clustered, grid, k=4)
        assert stats.reduction > 0.0

    def test_accepts_point_clouds(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.normal(size=(40, 3)))
        stats = neighborhood_std_stats(cloud, cloud, k=3)
        assert stats.reduction == 0.0

    def test_per_point_values_length(self):
        rng = np.random.default_rng(6)
        vals = per_point_neighbor_std(rng.normal(size=(30, 3)), k=4)
        assert vals.shape == (30,)


class TestWelchTTest:
    def test_identical_samples_give_zero(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        t, _ = welch_t_test(a, a.copy())
        assert t == 0.0

    def test_hand_computed_equal_variance_case(self):
        t, dof = welch_t_test([1, 2, 3, 4, 5], [3, 4, 5, 6, 7])
        assert t == pytest.approx(-2.0)
        assert dof == pytest.approx(8.0)

    def test_antisymmetry(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=20), rng.normal(loc=0.5, size=25)
        t_ab, dof_ab = welch_t_test(a, b)
        t_ba, dof_ba = welch_t_test(b, a)
        assert t_ab == pytest.approx(-t_ba)
        assert dof_ab == pytest.approx(dof_ba)

    def test_degenerate_samples_rejected(self):
        with pytest.raises(DegenerateSamplesError):
            welch_t_test([1.0], [1.0, 2.0])
        with pytest.raises(DegenerateSamplesError):
            welch_t_test([2.0, 2.0], [3.0, 3.0])
