import dataclasses
import math

import numpy as np
import pytest

from ckmplan.constants import SPEED_OF_LIGHT
from ckmplan.errors import InfeasibleError
from ckmplan.optim.ratemodel import (
    LinkBudget,
    PlanState,
    calibrate_beta0,
    check_feasibility,
    evaluate_plan_on_truth,
    load_plan,
    rate,
    rate_alpha_gradient,
    save_plan,
    sc_gain,
    sc_gain_gradient,
    truth_gains,
    truth_rates,
)


def _straight_plan(budget, starts, ends):
    starts, ends = np.asarray(starts, float), np.asarray(ends, float)
    M, N = len(starts), budget.num_slots
    Q = np.stack([np.linspace(s, e, N) for s, e in zip(starts, ends)])
    return PlanState(Q=Q, A=np.full((M, N), 1.0 / M), P=np.full((M, N), budget.p_max / M)), (starts, ends)


class TestRate:
    def test_formula(self, small_budget):
        gain = 1e-8
        expected = 0.5e6 * math.log2(1 + 0.25 * gain / (small_budget.n0 * 0.5e6))
        assert rate(0.5, 0.25, gain, small_budget) == pytest.approx(expected, rel=1e-12)

    def test_alpha_gradient(self, small_budget):
        alpha = np.array([0.05, 0.3, 0.9])
        k_b = 0.5 * 1e-9 / (small_budget.n0 * small_budget.b_max)
        h = 1e-7
        fd = (rate(alpha + h, 0.5, 1e-9, small_budget) - rate(alpha - h, 0.5, 1e-9, small_budget)) / (2 * h)
        np.testing.assert_allclose(rate_alpha_gradient(alpha, k_b, small_budget.b_max), fd, rtol=1e-6)

    def test_rate_grows_with_share(self, small_budget):
        r = rate(np.linspace(0.01, 1.0, 50), 1.0, 1e-9, small_budget)
        assert np.all(np.diff(r) > 0)


class TestStatisticalChannel:
    def test_gain_gradient(self, empty_scene):
        q = np.array([[30.0, 40.0], [200.0, 90.0], [125.0, 160.0]])
        h = 1e-4
        fd = np.stack([(sc_gain(q + h * e, empty_scene, 1e-3) - sc_gain(q - h * e, empty_scene, 1e-3)) / (2 * h)
                       for e in np.eye(2)], axis=1)
        np.testing.assert_allclose(sc_gain_gradient(q, empty_scene, 1e-3), fd, rtol=1e-6)

    def test_gain_uses_3d_distance(self, empty_scene):
        d2 = 30.0 ** 2 + 40.0 ** 2 + 75.0 ** 2
        assert sc_gain(np.array(empty_scene.bs_xy) + [30.0, 40.0], empty_scene, 2.0) == pytest.approx(2.0 / d2)

    def test_rejects_non_positive_beta0(self, empty_scene):
        with pytest.raises(ValueError):
            sc_gain([[0.0, 0.0]], empty_scene, 0.0)

    def test_calibration_matches_free_space(self, empty_scene):
        from ckmplan.gridworld import compute_ground_truth_ckm

        truth = compute_ground_truth_ckm(empty_scene, 2.4e9)
        expected = (SPEED_OF_LIGHT / (4 * math.pi * 2.4e9)) ** 2
        assert calibrate_beta0(empty_scene, truth) == pytest.approx(expected, rel=1e-9)


class TestLinkBudget:
    def test_step(self, small_budget):
        assert small_budget.tau == pytest.approx(2.0)
        assert small_budget.step_max == pytest.approx(40.0)

    def test_validate(self, small_budget):
        small_budget.validate(2)
        with pytest.raises(ValueError):
            dataclasses.replace(small_budget, p_max=0.0).validate(2)
        with pytest.raises(ValueError):
            dataclasses.replace(small_budget, epsilon_alpha=0.5).validate(2)
        with pytest.raises(ValueError):
            dataclasses.replace(small_budget, r_min=-1.0).validate(2)


class TestFeasibility:
    def test_straight_plan_is_feasible(self, empty_scene, small_budget):
        plan, endpoints = _straight_plan(small_budget, [[20, 20], [20, 100]], [[200, 20], [200, 100]])
        assert check_feasibility(plan, empty_scene, small_budget, endpoints) == []

    def test_reports_each_violation(self, empty_scene, small_budget):
        plan, endpoints = _straight_plan(small_budget, [[20, 20], [20, 100]], [[200, 20], [200, 100]])
        plan.A[0, 3] = 0.8
        plan.P[1, 4] = -0.1
        plan.Q[1, 6] = [240.0, 100.0]
        plan.Q[0, -1] = [199.0, 20.0]
        text = "\n".join(check_feasibility(plan, empty_scene, small_budget, endpoints))
        assert "slot 3 sum to" in text
        assert "negative power p[1,4]" in text
        assert "UAV 1 moves" in text
        assert "UAV 0 does not end" in text

    def test_obstacle_clearance(self, tiny_scene, small_budget):
        plan, endpoints = _straight_plan(small_budget, [[20, 60], [20, 240]], [[200, 60], [200, 240]])
        center, _ = tiny_scene.obstacles[0]
        plan.Q[0, 5] = center
        violations = check_feasibility(plan, tiny_scene, small_budget, endpoints)
        assert any("from obstacle 0" in v for v in violations)

    def test_leaving_the_area(self, empty_scene, small_budget):
        plan, endpoints = _straight_plan(small_budget, [[5, 5]], [[5, 200]])
        plan.Q[0, 4, 0] = -10.0
        assert any("leaves the area" in v for v in check_feasibility(plan, empty_scene, small_budget, endpoints))

    def test_predicted_rate_floor(self, empty_scene, small_budget):
        budget = dataclasses.replace(small_budget, r_min=1e9)
        plan, endpoints = _straight_plan(budget, [[20, 20]], [[200, 20]])
        plan.rates = np.full((1, budget.num_slots), 1e6)
        assert any("R_min" in v for v in check_feasibility(plan, empty_scene, budget, endpoints))


class TestTruthEvaluation:
    def test_truth_gains_use_containing_cell(self, tiny_scene, tiny_truth):
        centers = tiny_scene.cell_centers()
        Q = np.stack([centers[3, 7], centers[20, 30]])[None]
        np.testing.assert_array_equal(truth_gains(Q, tiny_truth, tiny_scene)[0],
                                      [tiny_truth.gains[3, 7], tiny_truth.gains[20, 30]])

    def test_min_average_rate(self, empty_scene, small_budget):
        from ckmplan.gridworld import compute_ground_truth_ckm

        truth = compute_ground_truth_ckm(empty_scene, 2.4e9)
        plan, endpoints = _straight_plan(small_budget, [[20, 20], [20, 100]], [[200, 20], [200, 100]])
        table = truth_rates(plan, truth, empty_scene, small_budget)
        assert evaluate_plan_on_truth(plan, truth, empty_scene, small_budget, endpoints) == pytest.approx(
            table.mean(axis=1).min())
        plan.A[:, 0] = 0.9
        with pytest.raises(InfeasibleError) as info:
            evaluate_plan_on_truth(plan, truth, empty_scene, small_budget, endpoints)
        assert info.value.violations


def test_plan_file_round_trip(tmp_path, small_budget):
    plan, _ = _straight_plan(small_budget, [[20, 20]], [[200, 20]])
    plan.rates = np.full((1, small_budget.num_slots), 2e6)
    plan.metadata = {"converged": True}
    path = save_plan(tmp_path / "plan_ckm.json", plan, "ckm", small_budget, truth_rate_table=plan.rates * 0.5)
    loaded, record = load_plan(path)
    np.testing.assert_array_equal(loaded.Q, plan.Q)
    np.testing.assert_array_equal(loaded.rates, plan.rates)
    assert record.planner == "ckm"
    assert record.truth_min_rate == pytest.approx(1e6)
    assert record.budget["num_slots"] == small_budget.num_slots
    assert loaded.metadata == {"converged": True}
