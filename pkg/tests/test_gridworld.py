import math

import numpy as np
import pytest

from ckmplan.constants import NLOS_PENALTY, SPEED_OF_LIGHT
from ckmplan.errors import SceneError
from ckmplan.gridworld import (
    compute_ground_truth_ckm,
    compute_los_map,
    generate_scene,
    load_ckm,
    load_scene,
    save_ckm,
    save_scene,
    scene_from_buildings,
    trace_segments,
)
from tests.conftest import RES


def _sampled_los(scene, target, samples=1000):
    """Reference LoS by dense sampling along the segment."""
    xb, yb = scene.bs_xy
    t = (np.arange(samples) + 0.5) / samples
    x = xb + t * (target[0] - xb)
    y = yb + t * (target[1] - yb)
    z = scene.bs_height_m + t * (scene.uav_height_m - scene.bs_height_m)
    rows, cols = scene.shape
    i = np.clip(np.floor(x / scene.resolution_m).astype(int), 0, rows - 1)
    j = np.clip(np.floor(y / scene.resolution_m).astype(int), 0, cols - 1)
    return not np.any(scene.heights[i, j] > z)


class TestSceneGeneration:
    def test_same_seed_same_scene(self):
        a = generate_scene(3, 500.0, RES, 6, (20.0, 80.0))
        b = generate_scene(3, 500.0, RES, 6, (20.0, 80.0))
        np.testing.assert_array_equal(a.heights, b.heights)
        assert a.bs_xy == b.bs_xy
        assert a.buildings == b.buildings

    def test_footprints_are_disjoint_and_in_range(self):
        scene = generate_scene(1, 1000.0, RES, 12, (20.0, 80.0))
        assert len(scene.buildings) == 12
        grown = np.zeros(scene.shape, dtype=int)
        for r0, c0, r1, c1, h in scene.buildings:
            assert 4 <= r1 - r0 <= 12 and 4 <= c1 - c0 <= 12
            assert 20.0 <= h <= 80.0
            grown[r0:r1, c0:c1] += 1
        assert grown.max() == 1

    def test_base_station_on_free_cell(self):
        scene = generate_scene(5, 500.0, RES, 8, (20.0, 80.0))
        assert scene.heights[scene.cell_of(scene.bs_xy)] == 0.0

    def test_too_dense_scene_raises(self):
        with pytest.raises(SceneError, match="too dense"):
            generate_scene(0, 8 * RES, RES, 50, (20.0, 80.0))

    def test_non_integral_extent_raises(self):
        with pytest.raises(SceneError):
            generate_scene(0, 100.0, 7.0, 1, (20.0, 80.0))

    def test_empty_scene_is_all_los(self, empty_scene):
        assert compute_los_map(empty_scene).all()


class TestLineOfSight:
    def test_matches_dense_sampling(self, small_scene):
        los = compute_los_map(small_scene)
        centers = small_scene.cell_centers()
        rng = np.random.default_rng(0)
        cells = rng.integers(0, 64, size=(256, 2))
        mismatches = sum(
            int(bool(los[i, j]) != _sampled_los(small_scene, centers[i, j])) for i, j in cells)
        # dense sampling can miss a corner clipped over a very short length
        assert mismatches <= 2

    def test_shadow_behind_tower(self, small_scene):
        los = compute_los_map(small_scene)
        assert los[12, 12] == 1
        assert los[40, 40] == 0
        assert los[5, 60] == 1

    def test_taller_building_only_removes_los(self, small_scene):
        taller = scene_from_buildings(64 * RES, RES, [(24, 24, 36, 36, 95.0)], bs_xy=small_scene.bs_xy)
        before, after = compute_los_map(small_scene), compute_los_map(taller)
        assert not np.any((before == 0) & (after == 1))
        assert after.sum() < before.sum()

    def test_low_building_never_blocks(self):
        scene = scene_from_buildings(32 * RES, RES, [(10, 10, 20, 20, 20.0)], bs_xy=(2 * RES, 2 * RES))
        assert compute_los_map(scene).all()

    def test_blockers_count_distinct_buildings(self):
        buildings = [(10, 14, 12, 18, 90.0), (20, 14, 22, 18, 90.0)]
        scene = scene_from_buildings(32 * RES, RES, buildings, bs_xy=(2.5 * RES, 16.5 * RES))
        los, blockers = trace_segments(scene, np.array([[30.5 * RES, 16.5 * RES], [15.5 * RES, 16.5 * RES]]))
        assert not los.any()
        assert blockers.tolist() == [2, 1]


class TestGroundTruth:
    def test_free_space_formula(self, empty_scene):
        truth = compute_ground_truth_ckm(empty_scene, 2.4e9)
        center = empty_scene.cell_centers()[3, 29]
        d = math.sqrt(np.sum((center - np.array(empty_scene.bs_xy)) ** 2) + 75.0 ** 2)
        expected = (SPEED_OF_LIGHT / (4 * math.pi * d * 2.4e9)) ** 2
        assert truth.gains[3, 29] == pytest.approx(expected, rel=1e-12)

    def test_free_space_is_radially_monotone(self, empty_scene):
        truth = compute_ground_truth_ckm(empty_scene, 2.4e9)
        d = np.linalg.norm(empty_scene.cell_centers() - np.array(empty_scene.bs_xy), axis=-1).ravel()
        order = np.argsort(d, kind="stable")
        g = truth.gains.ravel()[order]
        assert np.all(np.diff(g) <= 1e-12 * g[:-1])

    def test_nlos_penalty_per_blocker(self, small_scene):
        truth = compute_ground_truth_ckm(small_scene, 2.4e9)
        free = compute_ground_truth_ckm(scene_from_buildings(64 * RES, RES, [], bs_xy=small_scene.bs_xy), 2.4e9)
        assert truth.gains[40, 40] == pytest.approx(free.gains[40, 40] * NLOS_PENALTY ** 2, rel=1e-12)
        assert truth.gains[12, 40] == pytest.approx(free.gains[12, 40], rel=1e-12)

    def test_gains_positive_and_db_consistent(self, small_truth):
        assert np.all(small_truth.gains > 0)
        np.testing.assert_allclose(small_truth.gains_db, 10 * np.log10(small_truth.gains))

    def test_reflections_only_add_power(self, small_scene, small_truth):
        with_reflections = compute_ground_truth_ckm(small_scene, 2.4e9, n_reflections=1)
        assert np.all(with_reflections.gains >= small_truth.gains)
        assert np.any(with_reflections.gains > small_truth.gains)

    def test_rejects_bad_arguments(self, small_scene):
        with pytest.raises(SceneError):
            compute_ground_truth_ckm(small_scene, 0.0)
        with pytest.raises(SceneError):
            compute_ground_truth_ckm(small_scene, 2.4e9, n_reflections=2)


class TestSceneFiles:
    def test_scene_round_trip(self, tmp_path, tiny_scene):
        loaded = load_scene(save_scene(tmp_path / "scene.json", tiny_scene))
        np.testing.assert_array_equal(loaded.heights, tiny_scene.heights)
        assert loaded.bs_xy == tiny_scene.bs_xy
        assert loaded.buildings == tiny_scene.buildings
        np.testing.assert_array_equal(compute_los_map(loaded), compute_los_map(tiny_scene))

    def test_ckm_grid_file(self, tmp_path, tiny_truth):
        path = save_ckm(tmp_path / "truth", tiny_truth)
        assert path.suffix == ".grid"
        assert path.stat().st_size == 4 * 32 * 32
        loaded = load_ckm(path, 2.4e9)
        np.testing.assert_allclose(loaded.gains_db, tiny_truth.gains_db, atol=1e-4)
