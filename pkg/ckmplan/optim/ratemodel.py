"""
Rate arithmetic shared by the planner and the evaluator, the statistical
channel baseline and the independent plan feasibility checker.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from ckmplan.constants import (
    DEFAULT_B_MAX_HZ,
    DEFAULT_D_MIN_M,
    DEFAULT_EPSILON_ALPHA,
    DEFAULT_N0_W_PER_HZ,
    DEFAULT_NUM_SLOTS,
    DEFAULT_P_MAX_W,
    DEFAULT_PERIOD_S,
    DEFAULT_V_MAX,
)
from ckmplan.errors import InfeasibleError
from ckmplan.grid_io import PathLike, write_json
from ckmplan.gridworld import EnvironmentScene, GroundTruthCkm, compute_los_map

logger = logging.getLogger(__name__)

_FEAS_TOL = 1e-6


@dataclass
class LinkBudget:
    p_max: float = field(default=DEFAULT_P_MAX_W, metadata={"help": "Total BS transmit power per slot (W).", "aliases": ["--pmax"]})
    b_max: float = field(default=DEFAULT_B_MAX_HZ, metadata={"help": "Total bandwidth per slot (Hz).", "aliases": ["--bmax"]})
    n0: float = field(default=DEFAULT_N0_W_PER_HZ, metadata={"help": "Noise power spectral density (W/Hz)."})
    r_min: float = field(default=0.0, metadata={"help": "Minimum average rate per UAV (bit/s), 0 disables it."})
    v_max: float = field(default=DEFAULT_V_MAX, metadata={"help": "Maximum UAV speed (m/s)."})
    period_s: float = field(default=DEFAULT_PERIOD_S, metadata={"help": "Flight period T (s).", "aliases": ["--T"]})
    num_slots: int = field(default=DEFAULT_NUM_SLOTS, metadata={"help": "Number of time slots N.", "aliases": ["--N"]})
    epsilon_alpha: float = field(default=DEFAULT_EPSILON_ALPHA, metadata={"help": "Lower bound on bandwidth shares."})
    d_min: float = field(default=DEFAULT_D_MIN_M, metadata={"help": "Clearance kept from obstacle disks (m)."})

    @property
    def tau(self) -> float:
        return self.period_s / self.num_slots

    @property
    def step_max(self) -> float:
        return self.v_max * self.tau

    def validate(self, num_uavs: int) -> None:
        positive = {k: v for k, v in asdict(self).items() if k != "r_min"}
        bad = [k for k, v in positive.items() if not v > 0]
        if bad or self.r_min < 0:
            raise ValueError(f"link budget fields must be positive: {bad or ['r_min']}")
        if self.epsilon_alpha >= 1.0 / num_uavs:
            raise ValueError(f"epsilon_alpha {self.epsilon_alpha} must be < 1/M = {1.0 / num_uavs}")


def rate(alpha, p, gain, budget: LinkBudget):
    """Achievable rate ``alpha * B * log2(1 + p * H / (N0 * alpha * B))`` in bit/s."""
    alpha = np.asarray(alpha, dtype=np.float64)
    bw = alpha * budget.b_max
    return bw * np.log2(1.0 + np.asarray(p) * np.asarray(gain) / (budget.n0 * bw))


def rate_alpha_gradient(alpha, k_b, b_max: float):
    """d rate / d alpha with ``k_b = p * H / (N0 * B)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return b_max * (np.log2(1.0 + k_b / alpha) - k_b / ((alpha + k_b) * math.log(2.0)))


def average_rate(rates):
    return np.mean(np.asarray(rates, dtype=np.float64), axis=-1)


def _distance(q, scene: EnvironmentScene) -> Tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64)
    delta = q - np.asarray(scene.bs_xy)
    d2 = np.sum(delta ** 2, axis=-1) + (scene.uav_height_m - scene.bs_height_m) ** 2
    return np.maximum(np.sqrt(d2), 0.5 * scene.resolution_m), delta


def sc_gain(q, scene: EnvironmentScene, beta0: float):
    """Statistical channel ``beta0 / d^2`` with ``d`` the 3-D BS distance."""
    if beta0 <= 0:
        raise ValueError(f"beta0 must be positive, got {beta0}")
    d, _ = _distance(q, scene)
    return beta0 / d ** 2


def sc_gain_gradient(q, scene: EnvironmentScene, beta0: float):
    """``-2 * beta0 * d^-4 * (q - q_BS)``, zero where the distance is clamped."""
    d, delta = _distance(q, scene)
    unclamped = (np.sum(delta ** 2, axis=-1) + (scene.uav_height_m - scene.bs_height_m) ** 2
                 >= (0.5 * scene.resolution_m) ** 2)
    return np.where(unclamped[..., None], -2.0 * beta0 * delta / d[..., None] ** 4, 0.0)


def calibrate_beta0(scene: EnvironmentScene, truth: GroundTruthCkm) -> float:
    """Reference gain that makes the statistical model match the truth at the
    LoS cell closest to the map center."""
    los = compute_los_map(scene).astype(bool)
    centers = scene.cell_centers()
    mid = np.array([scene.width_m / 2.0, scene.depth_m / 2.0])
    dist = np.linalg.norm(centers - mid, axis=-1)
    dist = np.where(los, dist, np.inf)
    i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
    if not np.isfinite(dist[i, j]):
        i, j = scene.cell_of(mid)
    d, _ = _distance(centers[i, j], scene)
    return float(truth.gains[i, j] * d ** 2)


@dataclass
class PlanState:
    Q: np.ndarray
    A: np.ndarray
    P: np.ndarray
    rates: Optional[np.ndarray] = None
    metadata: Dict = field(default_factory=dict)

    @property
    def num_uavs(self) -> int:
        return self.Q.shape[0]

    @property
    def num_slots(self) -> int:
        return self.Q.shape[1]

    def min_average_rate(self) -> float:
        if self.rates is None:
            raise ValueError("plan carries no rates")
        return float(np.min(average_rate(self.rates)))


Endpoints = Tuple[np.ndarray, np.ndarray]


def clearance_radii(scene: EnvironmentScene, budget: LinkBudget) -> Tuple[np.ndarray, np.ndarray]:
    """Obstacle centers ``[K, 2]`` and required distances ``radius + D_min``."""
    if not scene.obstacles:
        return np.zeros((0, 2)), np.zeros(0)
    centers = np.array([c for c, _ in scene.obstacles], dtype=np.float64)
    radii = np.array([r for _, r in scene.obstacles], dtype=np.float64) + budget.d_min
    return centers, radii


def check_feasibility(plan: PlanState, scene: EnvironmentScene, budget: LinkBudget,
                      endpoints: Endpoints, tol: float = _FEAS_TOL) -> List[str]:
    """Violated plan constraints, one string each; empty when feasible."""
    violations = []
    Q, A, P = plan.Q, plan.A, plan.P
    M, N = A.shape
    start, end = (np.asarray(e, dtype=np.float64) for e in endpoints)
    # distances are checked relative to the area size
    dist_tol = tol * max(1.0, scene.width_m, scene.depth_m)

    for m, n in zip(*np.nonzero((A < budget.epsilon_alpha - tol) | (A > 1.0 + tol))):
        violations.append(f"bandwidth share alpha[{m},{n}]={A[m, n]:.6g} outside [eps, 1]")
    for n in np.flatnonzero(np.abs(A.sum(axis=0) - 1.0) > tol):
        violations.append(f"bandwidth shares of slot {n} sum to {A[:, n].sum():.9g}")
    for n in np.flatnonzero(np.abs(P.sum(axis=0) - budget.p_max) > tol * max(1.0, budget.p_max)):
        violations.append(f"powers of slot {n} sum to {P[:, n].sum():.9g} != {budget.p_max}")
    for m, n in zip(*np.nonzero(P < -tol)):
        violations.append(f"negative power p[{m},{n}]={P[m, n]:.6g}")

    steps = np.linalg.norm(np.diff(Q, axis=1), axis=-1)
    for m, n in zip(*np.nonzero(steps > budget.step_max + dist_tol)):
        violations.append(f"UAV {m} moves {steps[m, n]:.6g} m in slot {n} > {budget.step_max:.6g} m")

    for m in range(M):
        if np.linalg.norm(Q[m, 0] - start[m]) > dist_tol:
            violations.append(f"UAV {m} does not start at {start[m].tolist()}")
        if np.linalg.norm(Q[m, -1] - end[m]) > dist_tol:
            violations.append(f"UAV {m} does not end at {end[m].tolist()}")

    outside = ((Q[..., 0] < -dist_tol) | (Q[..., 0] > scene.width_m + dist_tol)
               | (Q[..., 1] < -dist_tol) | (Q[..., 1] > scene.depth_m + dist_tol))
    for m, n in zip(*np.nonzero(outside)):
        violations.append(f"UAV {m} leaves the area at slot {n}")

    centers, radii = clearance_radii(scene, budget)
    if len(radii):
        dist = np.linalg.norm(Q[:, :, None, :] - centers[None, None], axis=-1)
        for m, n, k in zip(*np.nonzero(dist < radii[None, None] - dist_tol)):
            violations.append(
                f"UAV {m} at slot {n} is {dist[m, n, k]:.6g} m from obstacle {k} (< {radii[k]:.6g} m)")

    if budget.r_min > 0 and plan.rates is not None:
        avg = average_rate(plan.rates)
        for m in np.flatnonzero(avg < budget.r_min * (1.0 - tol)):
            violations.append(f"UAV {m} predicted average rate {avg[m]:.6g} < R_min {budget.r_min:.6g}")
    return violations


def truth_gains(Q: np.ndarray, truth: GroundTruthCkm, scene: EnvironmentScene) -> np.ndarray:
    """Ground-truth gains of the cells closest to every waypoint."""
    rows, cols = truth.shape
    i = np.clip(np.floor(Q[..., 0] / scene.resolution_m).astype(np.int64), 0, rows - 1)
    j = np.clip(np.floor(Q[..., 1] / scene.resolution_m).astype(np.int64), 0, cols - 1)
    return truth.gains[i, j]


def truth_rates(plan: PlanState, truth: GroundTruthCkm, scene: EnvironmentScene,
                budget: LinkBudget) -> np.ndarray:
    return rate(plan.A, plan.P, truth_gains(plan.Q, truth, scene), budget)


def evaluate_plan_on_truth(plan: PlanState, truth: GroundTruthCkm, scene: EnvironmentScene,
                           budget: LinkBudget, endpoints: Optional[Endpoints] = None) -> float:
    """Minimum over UAVs of the truth-evaluated average rate.

    Raises:
        InfeasibleError: if ``endpoints`` are given and the plan violates
            any constraint.
    """
    if endpoints is not None:
        violations = check_feasibility(plan, scene, budget, endpoints)
        if violations:
            raise InfeasibleError("plan is infeasible", violations)
    return float(np.min(average_rate(truth_rates(plan, truth, scene, budget))))


class PlanRecord(BaseModel):
    planner: str
    Q: List[List[List[float]]]
    A: List[List[float]]
    P: List[List[float]]
    budget: Dict[str, float]
    predicted_rates: Optional[List[List[float]]] = None
    truth_rates: Optional[List[List[float]]] = None
    predicted_min_rate: Optional[float] = None
    truth_min_rate: Optional[float] = None
    metadata: Dict = {}


def save_plan(path: PathLike, plan: PlanState, planner: str, budget: LinkBudget,
              truth_rate_table: Optional[np.ndarray] = None) -> Path:
    record = PlanRecord(
        planner=planner,
        Q=plan.Q.tolist(),
        A=plan.A.tolist(),
        P=plan.P.tolist(),
        budget={k: float(v) for k, v in asdict(budget).items()},
        predicted_rates=None if plan.rates is None else plan.rates.tolist(),
        truth_rates=None if truth_rate_table is None else truth_rate_table.tolist(),
        predicted_min_rate=None if plan.rates is None else plan.min_average_rate(),
        truth_min_rate=None if truth_rate_table is None else float(np.min(average_rate(truth_rate_table))),
        metadata=plan.metadata,
    )
    return write_json(path, record)


def load_plan(path: PathLike) -> Tuple[PlanState, PlanRecord]:
    record = PlanRecord.model_validate_json(Path(path).read_text())
    plan = PlanState(
        Q=np.asarray(record.Q), A=np.asarray(record.A), P=np.asarray(record.P),
        rates=None if record.predicted_rates is None else np.asarray(record.predicted_rates),
        metadata=dict(record.metadata),
    )
    return plan, record
