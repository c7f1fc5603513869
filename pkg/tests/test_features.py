import numpy as np
import pytest

from ckmplan.constants import FEATURE_CHANNELS
from ckmplan.errors import SceneError
from ckmplan.features import (
    MeasurementSet,
    build_feature_stack,
    knn_interpolate,
    load_feature_stack,
    location_jacobian,
    minmax_denormalize,
    minmax_normalize,
    normalize_location,
    sample_measurements,
    save_feature_stack,
)
from ckmplan.gridworld import compute_los_map


def _brute_force_knn(ms, k):
    rows, cols = ms.shape
    samples = np.stack([ms.rows, ms.cols], axis=1)
    out = np.empty(ms.shape)
    for i in range(rows):
        for j in range(cols):
            d2 = np.sum((samples - np.array([i, j])) ** 2, axis=1)
            pick = np.lexsort((np.arange(len(d2)), d2))[:k]
            out[i, j] = ms.gains_db[pick].mean()
    return out


def _manual_set(rows, cols, gains, shape):
    return MeasurementSet(rows=np.array(rows), cols=np.array(cols), gains=np.array(gains, dtype=float),
                          ratio=len(gains) / (shape[0] * shape[1]), seed=0, shape=shape)


class TestSampling:
    def test_count_and_order(self, tiny_truth):
        ms = sample_measurements(tiny_truth, 0.1, seed=4)
        assert len(ms) == round(0.1 * 1024)
        assert np.all(np.diff(ms.flat_index) > 0)
        np.testing.assert_array_equal(ms.gains, tiny_truth.gains[ms.rows, ms.cols])

    def test_full_ratio_covers_grid(self, tiny_truth):
        ms = sample_measurements(tiny_truth, 1.0, seed=0)
        assert ms.mask().all()
        assert len(ms.complement()[0]) == 0

    def test_seed_is_reproducible(self, tiny_truth):
        a = sample_measurements(tiny_truth, 0.05, seed=7)
        b = sample_measurements(tiny_truth, 0.05, seed=7)
        np.testing.assert_array_equal(a.flat_index, b.flat_index)

    def test_noise_only_perturbs_gains(self, tiny_truth):
        clean = sample_measurements(tiny_truth, 0.05, seed=2)
        noisy = sample_measurements(tiny_truth, 0.05, seed=2, noise_db=3.0)
        np.testing.assert_array_equal(clean.flat_index, noisy.flat_index)
        assert not np.allclose(clean.gains, noisy.gains)

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
    def test_invalid_ratio(self, tiny_truth, ratio):
        with pytest.raises(ValueError):
            sample_measurements(tiny_truth, ratio, seed=0)

    def test_ratio_too_small_for_grid(self, tiny_truth):
        with pytest.raises(SceneError):
            sample_measurements(tiny_truth, 1e-5, seed=0)


class TestKnn:
    def test_ties_resolved_by_sample_order(self):
        ms = _manual_set([0, 0, 2, 2], [0, 2, 0, 2], [1.0, 10.0, 100.0, 1000.0], (3, 3))
        assert knn_interpolate(ms, 1)[1, 1] == pytest.approx(0.0)
        assert knn_interpolate(ms, 3)[1, 1] == pytest.approx(10.0)
        assert knn_interpolate(ms, 2)[0, 1] == pytest.approx(5.0)

    def test_sampled_cell_with_k1_returns_its_value(self, tiny_measurements):
        grid = knn_interpolate(tiny_measurements, 1)
        np.testing.assert_allclose(grid[tiny_measurements.rows, tiny_measurements.cols],
                                   tiny_measurements.gains_db, rtol=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_brute_force(self, tiny_measurements, k):
        np.testing.assert_allclose(knn_interpolate(tiny_measurements, k),
                                   _brute_force_knn(tiny_measurements, k), rtol=1e-12, atol=1e-12)

    def test_k_larger_than_samples(self):
        ms = _manual_set([0, 1], [0, 1], [1.0, 2.0], (4, 4))
        with pytest.raises(ValueError):
            knn_interpolate(ms, 3)


class TestNormalization:
    def test_minmax_round_trip(self):
        values = np.array([-90.0, -70.0, -50.0])
        norm = minmax_normalize(values, -90.0, -50.0)
        np.testing.assert_allclose(norm, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(minmax_denormalize(norm, -90.0, -50.0), values)

    def test_degenerate_range_maps_to_zero(self):
        np.testing.assert_array_equal(minmax_normalize(np.full(4, 3.0), 3.0, 3.0), np.zeros(4))

    def test_location_corners(self):
        extent = ((0.0, 500.0), (0.0, 250.0))
        np.testing.assert_allclose(normalize_location([[0.0, 0.0], [500.0, 250.0], [250.0, 50.0]], extent),
                                   [[0.0, 0.0], [1.0, 1.0], [0.5, 0.2]])
        np.testing.assert_allclose(location_jacobian(extent), np.diag([1 / 500.0, 1 / 250.0]))

    def test_location_outside_extent(self):
        with pytest.raises(ValueError):
            normalize_location([501.0, 10.0], ((0.0, 500.0), (0.0, 500.0)))


class TestFeatureStack:
    def test_channels(self, tiny_scene, tiny_measurements, tiny_stack):
        assert tiny_stack.channels.shape == (5, 32, 32)
        assert tiny_stack.channels.dtype == np.float32
        assert tiny_stack.channel_names == FEATURE_CHANNELS
        assert np.all((tiny_stack.channels >= 0) & (tiny_stack.channels <= 1))

        bs = tiny_stack.channels[0]
        assert bs.sum() == 1.0 and bs[tiny_scene.cell_of(tiny_scene.bs_xy)] == 1.0
        sampled = tiny_stack.channels[2]
        assert np.all(sampled[~tiny_measurements.mask()] == 0)
        np.testing.assert_array_equal(tiny_stack.channels[3], compute_los_map(tiny_scene))

    def test_target_norm_is_sampled_range(self, tiny_measurements, tiny_stack):
        lo, hi = tiny_stack.target_norm
        assert lo == pytest.approx(tiny_measurements.gains_db.min())
        assert hi == pytest.approx(tiny_measurements.gains_db.max())

    def test_shape_mismatch(self, tiny_scene, tiny_measurements):
        los = compute_los_map(tiny_scene)
        with pytest.raises(SceneError):
            build_feature_stack(tiny_scene, tiny_measurements, los[:16], np.zeros((32, 32)))

    def test_file_round_trip(self, tmp_path, tiny_stack):
        loaded = load_feature_stack(save_feature_stack(tmp_path / "features.grid", tiny_stack))
        np.testing.assert_array_equal(loaded.channels, tiny_stack.channels)
        np.testing.assert_allclose(np.array(loaded.norm_params), np.array(tiny_stack.norm_params))
        assert loaded.extent == tiny_stack.extent
