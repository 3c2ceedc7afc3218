import numpy as np
import pytest

from stn3d.shapes import (
    KINDS,
    PARTS_PER_KIND,
    CloudParseError,
    DatasetConfig,
    gen_shape,
    load_dataset,
    make_dataset,
    read_cloud,
    write_cloud,
    write_dataset,
)


class TestGenShape:
    def test_deterministic(self):
        a = gen_shape("table", 512, seed=7)
        b = gen_shape("table", 512, seed=7)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.part_labels, b.part_labels)

    def test_requested_point_count(self):
        for kind in KINDS:
            cloud = gen_shape(kind, 200, seed=1)
            assert cloud.n_points == 200

    def test_labels_in_range(self):
        for kind in KINDS:
            for seed in range(5):
                cloud = gen_shape(kind, 64, seed=seed)
                assert cloud.part_labels.min() >= 0
                assert cloud.part_labels.max() < PARTS_PER_KIND[kind]
                assert cloud.category == KINDS.index(kind)

    def test_normalized(self):
        cloud = gen_shape("rocket", 256, seed=3)
        assert np.linalg.norm(cloud.points.mean(axis=0)) < 1e-10
        assert np.linalg.norm(cloud.points, axis=1).max() == pytest.approx(1.0, abs=1e-12)

    def test_part_proportions_within_configured_ranges(self):
        for seed in range(100):
            cloud = gen_shape("table", 256, seed=seed)
            frac = float((cloud.part_labels == 1).mean())
            assert 0.2 <= frac <= 0.6  # configured range is (0.30, 0.50) plus rounding

    def test_all_kinds_have_every_part(self):
        for kind in KINDS:
            cloud = gen_shape(kind, 300, seed=0)
            assert set(np.unique(cloud.part_labels)) == set(range(PARTS_PER_KIND[kind]))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown shape kind"):
            gen_shape("chair", 64, seed=0)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            gen_shape("table", 16, seed=0)

    def test_rigid_augment_changes_pose_not_labels(self):
        plain = gen_shape("lamp", 128, seed=5, augment="none")
        rotated = gen_shape("lamp", 128, seed=5, augment="rigid")
        np.testing.assert_array_equal(plain.part_labels, rotated.part_labels)
        assert not np.allclose(plain.points, rotated.points)
        # rigid motion of a normalized cloud keeps normalization
        assert np.linalg.norm(rotated.points, axis=1).max() == pytest.approx(1.0, abs=1e-12)

    def test_jitter_augment_deterministic(self):
        a = gen_shape("earphone", 128, seed=9, augment="rigid+jitter")
        b = gen_shape("earphone", 128, seed=9, augment="rigid+jitter")
        np.testing.assert_array_equal(a.points, b.points)


class TestCloudIO:
    def test_round_trip_bit_exact(self, tmp_path):
        cloud = gen_shape("earphone", 100, seed=11)
        path = tmp_path / "cloud.txt"
        write_cloud(path, cloud, parts=2)
        loaded, parts = read_cloud(path)
        np.testing.assert_array_equal(loaded.points, cloud.points)
        np.testing.assert_array_equal(loaded.part_labels, cloud.part_labels)
        assert loaded.category == cloud.category
        assert parts == 2

    def test_three_point_file(self, tmp_path):
        path = tmp_path / "tiny.txt"
        path.write_text("# category 1\n# parts 3\n0 0 0 0\n1 0 0 1\n0 1 0 2\n")
        cloud, parts = read_cloud(path)
        assert cloud.n_points == 3
        assert parts == 3
        assert cloud.category == 1

    def test_unlabeled_file(self, tmp_path):
        path = tmp_path / "plain.txt"
        path.write_text("0 0 0\n1 1 1\n")
        cloud, parts = read_cloud(path)
        assert cloud.part_labels is None and parts is None

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0 0\n1 oops 0 1\n")
        with pytest.raises(CloudParseError, match=":2:"):
            read_cloud(path)

    def test_label_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "bad_label.txt"
        path.write_text("# parts 2\n0 0 0 0\n1 0 0 2\n")
        with pytest.raises(CloudParseError, match="out of range"):
            read_cloud(path)


class TestDataset:
    def test_split_sizes_and_disjointness(self):
        config = DatasetConfig(per_kind=100, n_points=32, seed=4)
        ds = make_dataset(config)
        assert len(ds) == 400
        train, val, test = (ds.split_indices(s) for s in ("train", "val", "test"))
        assert (len(train), len(val), len(test)) == (280, 40, 80)
        assert not (set(train) & set(val) | set(train) & set(test) | set(val) & set(test))

    def test_pipeline_reproducible_to_the_byte(self, tmp_path):
        config = DatasetConfig(per_kind=4, n_points=48, seed=2, augment="rigid")
        roots = []
        for name in ("a", "b"):
            root = tmp_path / name
            write_dataset(make_dataset(config), root)
            roots.append(root)
        files_a = sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(roots[1]) for p in roots[1].rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (roots[0] / rel).read_bytes() == (roots[1] / rel).read_bytes()

    def test_write_load_round_trip(self, tmp_path):
        config = DatasetConfig(per_kind=3, n_points=40, seed=6, kinds=("table", "rocket"))
        ds = make_dataset(config)
        write_dataset(ds, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert loaded.kinds == ds.kinds
        assert loaded.splits == ds.splits
        assert loaded.config == config
        for a, b in zip(loaded.shapes, ds.shapes):
            np.testing.assert_array_equal(a.points, b.points)
            np.testing.assert_array_equal(a.part_labels, b.part_labels)

    def test_num_parts_is_max_over_kinds(self):
        ds = make_dataset(DatasetConfig(per_kind=2, n_points=32, seed=0))
        assert ds.num_parts() == 3

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
