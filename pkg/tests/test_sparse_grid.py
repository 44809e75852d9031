import numpy as np
import pytest

from agriradar.errors import ConfigError
from agriradar.scene_sim import ClassLabel
from agriradar.sparse_grid import (
    GridError,
    GridSpec,
    SparseVoxelTensor,
    align_supports,
    filter_rows,
    to_point_cloud,
    voxelize,
)


def _tensor(spec, rows, features):
    return SparseVoxelTensor(spec, np.asarray(rows).reshape(-1, 3), np.asarray(features, float))


class TestGridSpec:
    def test_default_voxel_size(self):
        np.testing.assert_allclose(GridSpec().voxel_size, [0.24, 40.0 / 150.0, 0.3])

    def test_validate(self):
        with pytest.raises(ConfigError):
            GridSpec(dims=(10, 0, 10)).validate()
        with pytest.raises(ConfigError):
            GridSpec(lower=(4.0, 0.0, 0.0), upper=(2.0, 1.0, 1.0)).validate()

    def test_ravel_unravel(self, small_grid, rng):
        idx = np.column_stack([rng.integers(0, d, 50) for d in small_grid.dims])
        np.testing.assert_array_equal(small_grid.unravel(small_grid.ravel(idx)), idx)

    def test_equality_ignores_container_type(self):
        assert GridSpec((2, 2, 2), (0, 0, 0), (1, 1, 1)) == GridSpec([2, 2, 2], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


class TestTensor:
    def test_rejects_unsorted(self, small_grid):
        with pytest.raises(GridError):
            _tensor(small_grid, [[1, 0, 0], [0, 0, 0]], [1.0, 2.0])

    def test_rejects_duplicates(self, small_grid):
        with pytest.raises(GridError):
            _tensor(small_grid, [[1, 2, 3], [1, 2, 3]], [1.0, 2.0])

    def test_rejects_out_of_grid(self, small_grid):
        with pytest.raises(GridError):
            _tensor(small_grid, [[32, 0, 0]], [1.0])

    def test_rejects_row_mismatch(self, small_grid):
        with pytest.raises(GridError):
            _tensor(small_grid, [[0, 0, 0]], [1.0, 2.0])


class TestVoxelize:
    def test_single_point_at_center(self):
        spec = GridSpec()
        t = voxelize(spec.centers(np.array([[0, 0, 0]])), np.array([2.5]), spec)
        assert t.indices.tolist() == [[0, 0, 0]]
        assert t.features.tolist() == [[2.5]]

    def test_colocated_points_sum(self, small_grid):
        center = small_grid.centers(np.array([[3, 4, 5]]))[0]
        t = voxelize(np.array([center, center + 0.01]), np.array([1.0, 2.0]), small_grid)
        assert len(t) == 1
        assert t.features[0, 0] == 3.0

    def test_points_outside_dropped(self, small_grid):
        t = voxelize(np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]), np.ones(2), small_grid)
        assert len(t) == 0

    def test_upper_bound_is_exclusive(self, small_grid):
        t = voxelize(np.array([small_grid.upper]), np.ones(1), small_grid)
        assert len(t) == 0

    def test_matches_dense_scatter_add(self, small_grid, rng):
        lo, hi = np.asarray(small_grid.lower), np.asarray(small_grid.upper)
        points = rng.uniform(lo - 1.0, hi + 1.0, size=(1000, 3))
        values = rng.uniform(0.0, 1.0, 1000)
        t = voxelize(points, values, small_grid, reduce="sum")

        dense = np.zeros(small_grid.dims)
        hit = np.zeros(small_grid.dims, dtype=bool)
        idx = np.floor((points - lo) / small_grid.voxel_size).astype(int)
        inside = np.all((idx >= 0) & (idx < small_grid.dims), axis=1)
        np.add.at(dense, tuple(idx[inside].T), values[inside])
        hit[tuple(idx[inside].T)] = True

        np.testing.assert_array_equal(t.indices, np.argwhere(hit))
        np.testing.assert_allclose(t.features[:, 0], dense[hit], rtol=1e-12)

    def test_max_reduce(self, small_grid):
        c = small_grid.centers(np.array([[1, 1, 1]]))[0]
        t = voxelize(np.array([c, c, c]), np.array([0.2, 0.9, 0.4]), small_grid, reduce="max")
        assert t.features[0, 0] == 0.9

    def test_majority_ties_to_smallest_code(self, small_grid):
        c = small_grid.centers(np.array([[2, 2, 2]]))[0]
        t = voxelize(np.array([c] * 4), np.array([4.0, 2.0, 4.0, 2.0]), small_grid, reduce="majority")
        assert t.features[0, 0] == 2.0

    def test_majority_needs_integer_codes(self, small_grid):
        c = small_grid.centers(np.array([[2, 2, 2]]))[0]
        with pytest.raises(GridError):
            voxelize(np.array([c]), np.array([1.5]), small_grid, reduce="majority")

    def test_nan_rejected(self, small_grid):
        with pytest.raises(GridError):
            voxelize(np.array([[np.nan, 0.0, 0.0]]), np.ones(1), small_grid)

    def test_unknown_reduction(self, small_grid):
        with pytest.raises(GridError):
            voxelize(np.zeros((1, 3)), np.ones(1), small_grid, reduce="mean")


class TestAlignSupports:
    def test_identical_support_unchanged(self, small_grid):
        a = _tensor(small_grid, [[0, 0, 0], [1, 2, 3]], [1.0, 2.0])
        b = _tensor(small_grid, [[0, 0, 0], [1, 2, 3]], [[5.0, 6.0], [7.0, 8.0]])
        ref, out = align_supports(a, b, [0.0, 0.0])
        assert ref == a
        assert out == b

    def test_empty_b_is_filled(self, small_grid):
        a = _tensor(small_grid, [[0, 0, 0], [1, 2, 3]], [1.0, 2.0])
        _, out = align_supports(a, SparseVoxelTensor.empty(small_grid, 2), [9.0, -1.0])
        assert out.features.tolist() == [[9.0, -1.0], [9.0, -1.0]]

    def test_random_supports_match_set_oracle(self, small_grid, rng):
        def random_tensor(n):
            keys = np.unique(rng.integers(0, small_grid.num_voxels, n))
            return SparseVoxelTensor.from_keys(small_grid, keys, rng.uniform(1, 2, len(keys)))

        a, b = random_tensor(300), random_tensor(300)
        _, out = align_supports(a, b, -1.0)
        lookup = {tuple(i): f for i, f in zip(b.indices.tolist(), b.features[:, 0])}
        np.testing.assert_array_equal(out.indices, a.indices)
        for row, value in zip(out.indices.tolist(), out.features[:, 0]):
            assert value == lookup.get(tuple(row), -1.0)

    def test_spec_mismatch(self, small_grid):
        other = GridSpec(dims=(8, 8, 8), lower=small_grid.lower, upper=small_grid.upper)
        with pytest.raises(GridError):
            align_supports(SparseVoxelTensor.empty(small_grid), SparseVoxelTensor.empty(other), 0.0)


class TestFilterAndConvert:
    def test_filter_rows(self, small_grid):
        t = _tensor(small_grid, [[0, 0, 0], [0, 0, 1], [5, 5, 5]], [0.2, 0.7, 0.9])
        assert filter_rows(t, lambda i, f: np.ones(len(i), bool)) == t
        assert len(filter_rows(t, lambda i, f: np.zeros(len(i), bool))) == 0
        kept = filter_rows(t, lambda i, f: f[:, 0] > 0.5)
        assert kept.indices.tolist() == [[0, 0, 1], [5, 5, 5]]

    def test_to_point_cloud_voxel_center(self):
        spec = GridSpec()
        cloud = to_point_cloud(_tensor(spec, [[0, 0, 0]], [float(ClassLabel.GROUND)]))
        np.testing.assert_allclose(cloud.points, [[4.12, -20.0 + 0.5 * 40.0 / 150.0, -19.85]])
        assert cloud.labels.tolist() == [int(ClassLabel.GROUND)]

    def test_free_rows_dropped(self, small_grid):
        t = _tensor(small_grid, [[0, 0, 0], [1, 1, 1]], [0.0, 0.0])
        assert len(to_point_cloud(t)) == 0

    def test_non_integer_classes(self, small_grid):
        with pytest.raises(GridError):
            to_point_cloud(_tensor(small_grid, [[0, 0, 0]], [1.5]))

    def test_voxel_centers_are_a_fixed_point(self, small_grid, rng):
        keys = np.unique(rng.integers(0, small_grid.num_voxels, 200))
        t = SparseVoxelTensor.from_keys(small_grid, keys, rng.integers(1, 5, len(keys)).astype(float))
        cloud = to_point_cloud(t)
        again = voxelize(cloud.points, cloud.labels.astype(float), small_grid, reduce="majority")
        assert again == t
