import numpy as np
import pytest
import torch

from ckmplan.features import build_feature_stack, knn_interpolate, sample_measurements
from ckmplan.gridworld import compute_ground_truth_ckm, compute_los_map, scene_from_buildings
from ckmplan.optim.ratemodel import LinkBudget

RES = 7.8125


@pytest.fixture
def small_scene():
    """64x64 cells (500 m) with one 60 m tower between the BS and the far corner."""
    return scene_from_buildings(64 * RES, RES, [(24, 24, 36, 36, 60.0)], bs_xy=(12 * RES, 12 * RES))


@pytest.fixture
def tiny_scene():
    """32x32 cells (250 m) with two buildings."""
    return scene_from_buildings(32 * RES, RES, [(8, 14, 13, 19, 50.0), (20, 6, 25, 10, 80.0)],
                                bs_xy=(4.5 * RES, 4.5 * RES))


@pytest.fixture
def empty_scene():
    return scene_from_buildings(32 * RES, RES, [], bs_xy=(16 * RES, 16 * RES))


@pytest.fixture
def small_truth(small_scene):
    return compute_ground_truth_ckm(small_scene, 2.4e9)


@pytest.fixture
def tiny_truth(tiny_scene):
    return compute_ground_truth_ckm(tiny_scene, 2.4e9)


@pytest.fixture
def tiny_measurements(tiny_truth):
    return sample_measurements(tiny_truth, 0.1, seed=0)


@pytest.fixture
def tiny_stack(tiny_scene, tiny_measurements):
    los = compute_los_map(tiny_scene)
    return build_feature_stack(tiny_scene, tiny_measurements, los, knn_interpolate(tiny_measurements, 3))


@pytest.fixture
def small_budget():
    """Short horizon budget sized for the small test scenes."""
    return LinkBudget(p_max=1.0, b_max=1e6, v_max=20.0, period_s=20.0, num_slots=10, d_min=5.0)


@pytest.fixture(autouse=True)
def _seed_everything():
    np.random.seed(0)
    torch.manual_seed(0)
