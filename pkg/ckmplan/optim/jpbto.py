"""
Joint power, bandwidth and trajectory planning for multiple UAVs.

The max-min average rate is improved by alternating over three blocks:
powers and bandwidth shares (cutting-plane LPs over their concave rate
functions) and trajectories (trust-region SCA using the channel gradient).
Rates are divided by ``B_max`` inside the subproblems.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from ckmplan.errors import InfeasibleError, NumericalError
from ckmplan.gridworld import EnvironmentScene, GroundTruthCkm, compute_los_map
from ckmplan.model.builder import CkmModel
from ckmplan.optim.convex import STATUS_INFEASIBLE, STATUS_OPTIMAL, ConeProgram, solve
from ckmplan.optim.ratemodel import (
    Endpoints,
    LinkBudget,
    PlanState,
    average_rate,
    check_feasibility,
    clearance_radii,
    rate,
    rate_alpha_gradient,
    sc_gain,
    sc_gain_gradient,
    truth_rates,
)

logger = logging.getLogger(__name__)

_LN2 = math.log(2.0)
_DETOUR_VERTICES = 16


@dataclass
class AoConfig:
    l_max: int = field(default=15, metadata={"help": "Maximum outer (alternating) iterations."})
    i_max: int = field(default=50, metadata={"help": "Maximum inner iterations of the power and bandwidth subproblems."})
    j_max: int = field(default=50, metadata={"help": "Maximum inner iterations of the trajectory subproblem."})
    eps_ao: float = field(default=1e-4, metadata={"help": "Outer stop threshold on the trajectory change (fraction of the area size)."})
    eps_alpha: float = field(default=1e-4, metadata={"help": "Inner stop threshold on the bandwidth/power change."})
    eps_q: float = field(default=1e-4, metadata={"help": "Inner stop threshold on the trajectory change (fraction of the area size)."})
    trust_radius: Optional[float] = field(default=None, metadata={"help": "Initial trajectory trust radius in meters (default V_max * tau)."})
    solver_tol: float = field(default=1e-8, metadata={"help": "Cone solver tolerance."})

    def validate(self) -> None:
        values = [self.l_max, self.i_max, self.j_max, self.eps_ao, self.eps_alpha, self.eps_q, self.solver_tol]
        if any(v <= 0 for v in values) or (self.trust_radius is not None and self.trust_radius <= 0):
            raise ValueError("AO settings must be positive")


@dataclass
class Linearization:
    """First-order expansion ``value + gradient . (x - anchor)``."""
    anchor: np.ndarray
    value: float
    gradient: np.ndarray

    def __call__(self, x) -> float:
        return float(self.value + np.dot(self.gradient, np.asarray(x, dtype=np.float64) - self.anchor))


class Channel(Protocol):
    def gains(self, Q: np.ndarray) -> np.ndarray: ...

    def gains_and_gradients(self, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...


class CkmChannel:
    """Linear gains and their position gradients from a trained CKM model."""

    def __init__(self, model: CkmModel) -> None:
        self.model = model
        (self.x_lo, self.x_hi), (self.y_lo, self.y_hi) = model.extent

    def _clip(self, Q: np.ndarray) -> np.ndarray:
        flat = np.asarray(Q, dtype=np.float64).reshape(-1, 2).copy()
        flat[:, 0] = np.clip(flat[:, 0], self.x_lo, self.x_hi)
        flat[:, 1] = np.clip(flat[:, 1], self.y_lo, self.y_hi)
        return flat

    def gains(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q)
        return self.model.gain_linear(self._clip(Q)).reshape(Q.shape[:-1])

    def gains_and_gradients(self, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Q = np.asarray(Q)
        gain, grad = self.model.gain_linear_gradient(self._clip(Q))
        return gain.reshape(Q.shape[:-1]), grad.reshape(Q.shape)


class StatisticalChannel:
    """``beta0 / d^2`` channel that ignores buildings."""

    def __init__(self, scene: EnvironmentScene, beta0: float) -> None:
        self.scene = scene
        self.beta0 = beta0

    def gains(self, Q: np.ndarray) -> np.ndarray:
        return sc_gain(Q, self.scene, self.beta0)

    def gains_and_gradients(self, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return sc_gain(Q, self.scene, self.beta0), sc_gain_gradient(Q, self.scene, self.beta0)


@dataclass
class SubproblemResult:
    value: np.ndarray
    objective: float
    history: List[float]
    linearizations: List[Linearization] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)


def normalized_rates(A: np.ndarray, P: np.ndarray, gains: np.ndarray, budget: LinkBudget) -> np.ndarray:
    return rate(A, P, gains, budget) / budget.b_max


def _min_average(rates: np.ndarray) -> float:
    return float(np.min(np.mean(rates, axis=1)))


def _meets_r_min(rates: np.ndarray, r_min_n: float) -> bool:
    return r_min_n <= 0 or bool(np.all(np.mean(rates, axis=1) >= r_min_n * (1.0 - 1e-9)))


def _cutting_plane_max_min(fn: Callable[[np.ndarray], np.ndarray], grad_fn: Callable[[np.ndarray], np.ndarray],
                           x0: np.ndarray, lo: float, hi: float, total: float, r_min_n: float,
                           max_iter: int, eps: float, solver_tol: float, name: str) -> SubproblemResult:
    """Maximize ``min_m mean_n f_mn(x_mn)`` over per-slot simplices of mass
    ``total`` for separable concave ``f`` by accumulating tangent cuts.

    The incumbent is the best point seen, so the returned objective never
    falls below the value at ``x0``.
    """
    M, N = x0.shape
    mn = M * N
    n_var = 2 * mn + 1
    x_idx = np.arange(mn)
    t_idx = mn + np.arange(mn)
    g_idx = 2 * mn

    prog = ConeProgram(n_var, objective=np.eye(1, n_var, g_idx).ravel())
    prog.set_box(x_idx, lo, hi)
    slot_rows = sp.csr_matrix((np.ones(mn), (np.tile(np.arange(N), M), x_idx)), shape=(N, n_var))
    prog.add_eq(slot_rows, np.full(N, total))
    avg_rows = sp.csr_matrix((np.full(mn, 1.0 / N), (np.repeat(np.arange(M), N), t_idx)), shape=(M, n_var))
    gamma_col = sp.csr_matrix((np.ones(M), (np.arange(M), np.full(M, g_idx))), shape=(M, n_var))
    prog.add_ineq(gamma_col - avg_rows, np.zeros(M))
    if r_min_n > 0:
        prog.add_ineq(-avg_rows, np.full(M, -r_min_n))

    linearizations: List[Linearization] = []

    def add_cuts(anchor: np.ndarray) -> None:
        f = fn(anchor).ravel()
        g = grad_fn(anchor).ravel()
        a = anchor.ravel()
        rows = sp.csr_matrix(
            (np.concatenate([np.ones(mn), -g]), (np.tile(np.arange(mn), 2), np.concatenate([t_idx, x_idx]))),
            shape=(mn, n_var))
        prog.add_ineq(rows, f - g * a)
        linearizations.extend(Linearization(np.array([a[i]]), f[i], np.array([g[i]])) for i in range(mn))

    best_x, best_obj = None, -np.inf
    rates0 = fn(x0)
    if _meets_r_min(rates0, r_min_n):
        best_x, best_obj = x0.copy(), _min_average(rates0)
    for anchor in (x0, np.full_like(x0, lo), np.full_like(x0, hi), np.full_like(x0, total / M)):
        add_cuts(np.clip(anchor, lo, hi))

    history = [best_obj] if best_x is not None else []
    flags: List[str] = []
    prev = x0
    for it in range(max_iter):
        result = solve(prog, tol=solver_tol)
        if result.status == STATUS_INFEASIBLE:
            raise InfeasibleError(f"{name} subproblem is infeasible", _r_min_report(fn, lo, hi, total, r_min_n, M, N))
        if result.status != STATUS_OPTIMAL or result.x is None:
            flags.append(f"{name}: solver stopped with status {result.status} at inner iteration {it}")
            logger.warning(flags[-1])
            break
        x_new = np.clip(result.x[x_idx].reshape(M, N), lo, hi)
        rates_new = fn(x_new)
        if _meets_r_min(rates_new, r_min_n):
            obj_new = _min_average(rates_new)
            if obj_new > best_obj:
                best_x, best_obj = x_new.copy(), obj_new
        if best_x is not None:
            history.append(best_obj)
        upper = result.objective
        step = float(np.linalg.norm(x_new - prev)) / max(total, 1e-300)
        if best_x is not None and (upper - best_obj <= 1e-7 * max(1.0, abs(upper)) or step <= eps):
            break
        add_cuts(x_new)
        prev = x_new

    if best_x is None:
        raise InfeasibleError(f"{name} subproblem found no point meeting R_min",
                              _r_min_report(fn, lo, hi, total, r_min_n, M, N))
    return SubproblemResult(best_x, best_obj, history, linearizations, flags)


def _r_min_report(fn, lo, hi, total, r_min_n, M, N) -> List[str]:
    full = fn(np.full((M, N), min(hi, total)))
    best = np.mean(full, axis=1)
    report = [f"UAV {m}: average rate with the whole budget {best[m]:.6g} < R_min {r_min_n:.6g} (x B_max)"
              for m in np.flatnonzero(best < r_min_n)]
    return report or [f"slots 0..{N - 1}: R_min cannot be met by all {M} UAVs at once"]


def solve_power(gains: np.ndarray, A: np.ndarray, budget: LinkBudget, cfg: AoConfig,
                P_start: Optional[np.ndarray] = None) -> SubproblemResult:
    """Powers maximizing the minimum average rate for fixed shares and positions."""
    M, N = A.shape
    P0 = np.full((M, N), budget.p_max / M) if P_start is None else np.asarray(P_start, dtype=np.float64)
    k_p = gains / (budget.n0 * A * budget.b_max)

    def fn(P):
        return A * np.log2(1.0 + k_p * P)

    def grad_fn(P):
        return A * k_p / ((1.0 + k_p * P) * _LN2)

    return _cutting_plane_max_min(fn, grad_fn, P0, 0.0, budget.p_max, budget.p_max,
                                  budget.r_min / budget.b_max, cfg.i_max, cfg.eps_alpha, cfg.solver_tol, "power")


def solve_bandwidth(gains: np.ndarray, P: np.ndarray, budget: LinkBudget, cfg: AoConfig,
                    A_start: Optional[np.ndarray] = None) -> SubproblemResult:
    """Bandwidth shares maximizing the minimum average rate for fixed powers and positions."""
    M, N = P.shape
    A0 = np.full((M, N), 1.0 / M) if A_start is None else np.asarray(A_start, dtype=np.float64)
    k_b = P * gains / (budget.n0 * budget.b_max)

    def fn(A):
        return A * np.log2(1.0 + k_b / A)

    def grad_fn(A):
        return rate_alpha_gradient(A, k_b, 1.0)

    return _cutting_plane_max_min(fn, grad_fn, A0, budget.epsilon_alpha, 1.0, 1.0,
                                  budget.r_min / budget.b_max, cfg.i_max, cfg.eps_alpha, cfg.solver_tol, "bandwidth")


def linearize_rates_q(channel: Channel, Q: np.ndarray, A: np.ndarray, P: np.ndarray,
                      budget: LinkBudget) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized rates ``[M, N]`` and their position gradients ``[M, N, 2]`` (per meter)."""
    gains, grads = channel.gains_and_gradients(Q)
    snr = P * gains / (budget.n0 * A * budget.b_max)
    rates = A * np.log2(1.0 + snr)
    coeff = P / (budget.n0 * budget.b_max * _LN2 * (1.0 + snr))
    return rates, coeff[..., None] * grads


def obstacle_lower_bound(q, anchor, center) -> float:
    """Tangent lower bound of ``||q - center||^2`` expanded at ``anchor``."""
    q, anchor, center = (np.asarray(v, dtype=np.float64) for v in (q, anchor, center))
    diff = anchor - center
    return float(diff @ diff + 2.0 * diff @ (q - anchor))


def _trajectory_program(Q: np.ndarray, rates: np.ndarray, grads: np.ndarray, scene: EnvironmentScene,
                        budget: LinkBudget, radius: float, scale: float) -> ConeProgram:
    M, N, _ = Q.shape
    n_q = M * N * 2
    n_var = n_q + 1
    g_idx = n_q
    q_hat = Q.reshape(-1) / scale

    def idx(m, n):
        return (m * N + n) * 2 + np.arange(2)

    prog = ConeProgram(n_var, objective=np.eye(1, n_var, g_idx).ravel())
    lo = q_hat - radius / scale
    hi = q_hat + radius / scale
    lo[0::2] = np.maximum(lo[0::2], 0.0)
    lo[1::2] = np.maximum(lo[1::2], 0.0)
    hi[0::2] = np.minimum(hi[0::2], scene.width_m / scale)
    hi[1::2] = np.minimum(hi[1::2], scene.depth_m / scale)
    prog.set_box(np.arange(n_q), lo, hi)

    # endpoints stay pinned
    pinned = np.concatenate([np.concatenate([idx(m, 0), idx(m, N - 1)]) for m in range(M)])
    prog.add_eq(sp.csr_matrix((np.ones(len(pinned)), (np.arange(len(pinned)), pinned)),
                              shape=(len(pinned), n_var)), q_hat[pinned])

    # gamma <= mean_n linearized rate, per UAV
    g_scaled = grads * scale
    rows = np.zeros((M, n_var))
    rhs = np.zeros(M)
    for m in range(M):
        for n in range(N):
            rows[m, idx(m, n)] = -g_scaled[m, n] / N
        rhs[m] = np.mean(rates[m] - np.sum(g_scaled[m] * Q[m] / scale, axis=-1))
    gamma_rows = rows.copy()
    gamma_rows[:, g_idx] = 1.0
    prog.add_ineq(gamma_rows, rhs)
    r_min_n = budget.r_min / budget.b_max
    if r_min_n > 0:
        prog.add_ineq(rows, rhs - r_min_n)

    if N > 1:
        a_idx = np.array([idx(m, n + 1) for m in range(M) for n in range(N - 1)])
        b_idx = np.array([idx(m, n) for m in range(M) for n in range(N - 1)])
        prog.add_soc(a_idx, budget.step_max / scale, b_idx=b_idx)

    centers, radii = clearance_radii(scene, budget)
    reach = math.sqrt(2.0) * radius + 1e-6 * scale
    obs_rows, obs_rhs = [], []
    for m in range(M):
        for n in range(1, N - 1):
            a = Q[m, n]
            for c, d in zip(centers, radii):
                if np.linalg.norm(a - c) - d > reach:
                    continue
                diff = (a - c) / scale
                row = np.zeros(n_var)
                row[idx(m, n)] = -2.0 * diff
                obs_rows.append(row)
                obs_rhs.append(diff @ diff - 2.0 * diff @ (a / scale) - (d / scale) ** 2)
    if obs_rows:
        prog.add_ineq(np.array(obs_rows), np.array(obs_rhs))
    return prog


def solve_trajectory(channel: Channel, A: np.ndarray, P: np.ndarray, Q_start: np.ndarray,
                     scene: EnvironmentScene, budget: LinkBudget, cfg: AoConfig,
                     radius: Optional[float] = None) -> SubproblemResult:
    """Trust-region SCA over the waypoints.

    Each step maximizes the linearized minimum average rate subject to the
    speed cones, pinned endpoints, the area box and linearized obstacle
    clearance. A step is kept only if the true objective improves; otherwise
    the trust radius is halved.
    """
    Q = np.asarray(Q_start, dtype=np.float64).copy()
    scale = max(scene.width_m, scene.depth_m)
    radius = radius or cfg.trust_radius or budget.step_max
    r_min_n = budget.r_min / budget.b_max
    M, N, _ = Q.shape

    rates, grads = linearize_rates_q(channel, Q, A, P, budget)
    obj = _min_average(rates)
    history = [obj]
    flags: List[str] = []
    linearizations = [Linearization(Q[m, n].copy(), float(rates[m, n]), grads[m, n].copy())
                      for m in range(M) for n in range(N)]
    min_radius = 1e-6 * scale

    for it in range(cfg.j_max):
        prog = _trajectory_program(Q, rates, grads, scene, budget, radius, scale)
        result = solve(prog, start=np.append(Q.reshape(-1) / scale, obj), tol=cfg.solver_tol)
        if result.status == STATUS_INFEASIBLE:
            raise InfeasibleError("trajectory subproblem is infeasible at its anchor",
                                  check_feasibility(PlanState(Q, A, P), scene, budget, (Q[:, 0], Q[:, -1])))
        if result.status != STATUS_OPTIMAL or result.x is None:
            flags.append(f"trajectory: solver stopped with status {result.status} at inner iteration {it}")
            logger.warning(flags[-1])
            break
        Q_new = result.x[:M * N * 2].reshape(M, N, 2) * scale
        Q_new[:, 0], Q_new[:, -1] = Q[:, 0], Q[:, -1]
        rates_new, grads_new = linearize_rates_q(channel, Q_new, A, P, budget)
        obj_new = _min_average(rates_new)
        step = float(np.linalg.norm(Q_new - Q)) / scale
        feasible = _meets_r_min(rates_new, r_min_n) and not check_feasibility(
            PlanState(Q_new, A, P), scene, budget, (Q[:, 0], Q[:, -1]))
        if feasible and obj_new >= obj:
            Q, rates, grads, obj = Q_new, rates_new, grads_new, obj_new
            history.append(obj)
            linearizations.extend(Linearization(Q[m, n].copy(), float(rates[m, n]), grads[m, n].copy())
                                  for m in range(M) for n in range(N))
            if step <= cfg.eps_q:
                break
        else:
            radius *= 0.5
            if radius < min_radius:
                break
    return SubproblemResult(Q, obj, history, linearizations, flags)


def _segment_clear(a: np.ndarray, b: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> bool:
    if not len(radii):
        return True
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(len(centers)) if denom == 0 else np.clip(((centers - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return bool(np.all(np.linalg.norm(closest - centers, axis=1) >= radii - 1e-9))


def _resample(path: np.ndarray, count: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] == 0:
        return np.repeat(path[:1], count, axis=0)
    targets = np.linspace(0.0, arc[-1], count)
    return np.stack([np.interp(targets, arc, path[:, 0]), np.interp(targets, arc, path[:, 1])], axis=1)


def detour_path(start, end, scene: EnvironmentScene, budget: LinkBudget, margin: float = 1.0) -> np.ndarray:
    """Shortest polyline from ``start`` to ``end`` on the visibility graph of
    polygons circumscribing the inflated obstacle disks."""
    start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    centers, radii = clearance_radii(scene, budget)
    inflate = 1.0 / math.cos(math.pi / _DETOUR_VERTICES)
    angles = 2.0 * math.pi * np.arange(_DETOUR_VERTICES) / _DETOUR_VERTICES
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    nodes = [start, end]
    for c, r in zip(centers, radii):
        for v in c + (r + margin) * inflate * ring:
            inside_area = 0.0 <= v[0] <= scene.width_m and 0.0 <= v[1] <= scene.depth_m
            if inside_area and np.all(np.linalg.norm(centers - v, axis=1) >= radii):
                nodes.append(v)
    nodes = np.array(nodes)
    n = len(nodes)
    rows, cols, weights = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if _segment_clear(nodes[i], nodes[j], centers, radii):
                w = float(np.linalg.norm(nodes[i] - nodes[j]))
                rows += [i, j]
                cols += [j, i]
                weights += [max(w, 1e-12)] * 2
    graph = sp.csr_matrix((weights, (rows, cols)), shape=(n, n))
    dist, pred = dijkstra(graph, directed=False, indices=0, return_predecessors=True)
    if not np.isfinite(dist[1]):
        raise InfeasibleError(f"no obstacle-free path from {start.tolist()} to {end.tolist()}")
    path, k = [1], 1
    while k != 0:
        k = int(pred[k])
        path.append(k)
    return nodes[path[::-1]]


def initial_trajectories(scene: EnvironmentScene, budget: LinkBudget, endpoints: Endpoints) -> np.ndarray:
    """Straight-line waypoints, replaced by a visibility-graph detour for
    UAVs whose straight line breaks obstacle clearance."""
    start, end = (np.asarray(e, dtype=np.float64) for e in endpoints)
    M, N = len(start), budget.num_slots
    centers, radii = clearance_radii(scene, budget)
    Q = np.empty((M, N, 2))
    for m in range(M):
        line = np.linspace(start[m], end[m], N)
        clear = not len(radii) or np.all(
            np.linalg.norm(line[:, None, :] - centers[None], axis=-1) >= radii[None])
        if clear:
            Q[m] = line
            continue
        path = detour_path(start[m], end[m], scene, budget)
        length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
        if length > (N - 1) * budget.step_max + 1e-9:
            raise InfeasibleError(
                f"UAV {m}: obstacle detour of {length:.1f} m exceeds the reachable "
                f"{(N - 1) * budget.step_max:.1f} m")
        Q[m] = _resample(path, N)
        logger.info(f"UAV {m}: straight line blocked, detour of {length:.1f} m used")
    Q[:, 0], Q[:, -1] = start, end
    return Q


def check_endpoints(scene: EnvironmentScene, budget: LinkBudget, endpoints: Endpoints) -> List[str]:
    start, end = (np.asarray(e, dtype=np.float64) for e in endpoints)
    problems = []
    reach = (budget.num_slots - 1) * budget.step_max
    centers, radii = clearance_radii(scene, budget)
    for m in range(len(start)):
        gap = float(np.linalg.norm(end[m] - start[m]))
        if gap > reach + 1e-9:
            problems.append(f"UAV {m}: endpoints {gap:.1f} m apart, reachable {reach:.1f} m")
        for label, q in (("start", start[m]), ("end", end[m])):
            if not (0.0 <= q[0] <= scene.width_m and 0.0 <= q[1] <= scene.depth_m):
                problems.append(f"UAV {m}: {label} {q.tolist()} outside the area")
            if len(radii) and np.any(np.linalg.norm(centers - q, axis=1) < radii):
                problems.append(f"UAV {m}: {label} {q.tolist()} violates obstacle clearance")
    return problems


def default_endpoints(scene: EnvironmentScene, budget: LinkBudget, num_uavs: int, seed: int = 0,
                      window: float = 0.15) -> Endpoints:
    """Start and end points near opposite corners of the area, on LoS cells
    that respect obstacle clearance.

    UAV ``m`` flies the main diagonal when ``m`` is even and the
    anti-diagonal when odd. Cells are drawn inside a ``window`` fraction of
    the area around each corner; seed 0 takes the cell closest to the corner.
    """
    los = compute_los_map(scene).astype(bool)
    centers = scene.cell_centers()
    obs_centers, radii = clearance_radii(scene, budget)
    clear = np.ones(scene.shape, dtype=bool)
    if len(radii):
        dist = np.linalg.norm(centers[:, :, None, :] - obs_centers[None, None], axis=-1)
        clear = np.all(dist >= radii[None, None] + 1e-6, axis=-1)
    usable = los & clear
    rng = np.random.default_rng(seed)
    W, D = scene.width_m, scene.depth_m
    corners = np.array([[0.0, 0.0], [W, D], [W, 0.0], [0.0, D]])

    def pick(corner: np.ndarray) -> np.ndarray:
        offset = np.abs(centers - corner)
        near = usable & (offset[..., 0] <= window * W) & (offset[..., 1] <= window * D)
        candidates = np.argwhere(near if near.any() else usable)
        if not len(candidates):
            raise InfeasibleError("no LoS cell satisfies obstacle clearance for endpoint placement")
        if seed == 0:
            d = np.linalg.norm(centers[candidates[:, 0], candidates[:, 1]] - corner, axis=1)
            i, j = candidates[int(np.argmin(d))]
        else:
            i, j = candidates[int(rng.integers(len(candidates)))]
        return centers[i, j].copy()

    starts, ends = [], []
    for m in range(num_uavs):
        a, b = (corners[0], corners[1]) if m % 2 == 0 else (corners[2], corners[3])
        starts.append(pick(a))
        ends.append(pick(b))
    return np.array(starts), np.array(ends)


@dataclass
class AoRecord:
    outer_iter: int
    internal_objective: float
    truth_min_rate: float = float("nan")


@dataclass
class AoResult:
    plan: PlanState
    history: List[AoRecord]
    inner_histories: List[List[float]] = field(default_factory=list)
    linearizations: List[Linearization] = field(default_factory=list)


def run_ao(channel: Channel, scene: EnvironmentScene, budget: LinkBudget, cfg: AoConfig,
           endpoints: Endpoints, Q_init: Optional[np.ndarray] = None,
           truth: Optional[GroundTruthCkm] = None, keep_linearizations: bool = False) -> AoResult:
    """Alternate power, bandwidth and trajectory updates until the
    trajectory settles or ``l_max`` outer iterations pass.

    Powers start at ``P_max / M`` in every slot and shares at ``1 / M``.
    """
    start = np.asarray(endpoints[0], dtype=np.float64)
    M, N = len(start), budget.num_slots
    budget.validate(M)
    cfg.validate()
    problems = check_endpoints(scene, budget, endpoints)
    if problems:
        raise InfeasibleError("endpoints are not reachable", problems)

    Q = initial_trajectories(scene, budget, endpoints) if Q_init is None else np.asarray(Q_init, dtype=np.float64)
    A = np.full((M, N), 1.0 / M)
    P = np.full((M, N), budget.p_max / M)
    scale = max(scene.width_m, scene.depth_m)
    radius = cfg.trust_radius or budget.step_max

    history: List[AoRecord] = []
    inner: List[List[float]] = []
    linearizations: List[Linearization] = []
    flags: List[str] = []
    converged = False
    for outer in range(1, cfg.l_max + 1):
        gains = channel.gains(Q)
        power = solve_power(gains, A, budget, cfg, P_start=P)
        P = power.value
        bandwidth = solve_bandwidth(gains, P, budget, cfg, A_start=A)
        A = bandwidth.value
        traj = solve_trajectory(channel, A, P, Q, scene, budget, cfg, radius=radius)
        delta = float(np.linalg.norm(traj.value - Q)) / scale
        Q = traj.value
        for sub in (power, bandwidth, traj):
            inner.append(sub.history)
            flags.extend(sub.flags)
            if keep_linearizations:
                linearizations.extend(sub.linearizations)

        objective = traj.objective * budget.b_max
        if not np.isfinite(objective):
            raise NumericalError(f"non-finite planner objective at outer iteration {outer}")
        record = AoRecord(outer_iter=outer, internal_objective=objective)
        if truth is not None:
            record.truth_min_rate = float(np.min(average_rate(truth_rates(PlanState(Q, A, P), truth, scene, budget))))
        history.append(record)
        logger.info(f"AO iteration {outer}: min rate {objective:.6g} bit/s, trajectory change {delta:.3g}")
        if delta <= cfg.eps_ao:
            converged = True
            break

    rates = rate(A, P, channel.gains(Q), budget)
    plan = PlanState(Q=Q, A=A, P=P, rates=rates, metadata={
        "outer_iterations": len(history),
        "converged": converged,
        "flags": flags,
    })
    return AoResult(plan=plan, history=history, inner_histories=inner, linearizations=linearizations)
