"""
Cone programs carried by the SCA subproblems, solved with cvxpy/Clarabel.

A program maximizes ``c @ x`` subject to linear equalities, linear
inequalities ``A x <= b``, box bounds and second-order cones
``||x[a] - x[b] - center|| <= bound``.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"


def _as_block(rows, n: int) -> sp.csr_matrix:
    if sp.issparse(rows):
        block = sp.csr_matrix(rows, dtype=np.float64)
    else:
        block = sp.csr_matrix(np.atleast_2d(np.asarray(rows, dtype=np.float64)))
    if block.shape[1] != n:
        raise ValueError(f"constraint rows have {block.shape[1]} columns, program has {n} variables")
    return block


@dataclass
class SocBlock:
    a_idx: np.ndarray
    b_idx: Optional[np.ndarray]
    center: np.ndarray
    bound: np.ndarray


@dataclass
class ConeProgram:
    n: int
    objective: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None
    eq_blocks: List[Tuple[sp.csr_matrix, np.ndarray]] = field(default_factory=list)
    ineq_blocks: List[Tuple[sp.csr_matrix, np.ndarray]] = field(default_factory=list)
    soc_blocks: List[SocBlock] = field(default_factory=list)

    def __post_init__(self):
        if self.objective is None:
            self.objective = np.zeros(self.n)
        self.objective = np.asarray(self.objective, dtype=np.float64)
        if self.objective.shape != (self.n,):
            raise ValueError(f"objective has shape {self.objective.shape}, expected ({self.n},)")
        self.lo = np.full(self.n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=np.float64)
        self.hi = np.full(self.n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=np.float64)

    def add_eq(self, rows, rhs) -> "ConeProgram":
        block = _as_block(rows, self.n)
        self.eq_blocks.append((block, np.atleast_1d(np.asarray(rhs, dtype=np.float64))))
        return self

    def add_ineq(self, rows, rhs) -> "ConeProgram":
        """Rows meaning ``row @ x <= rhs``."""
        block = _as_block(rows, self.n)
        self.ineq_blocks.append((block, np.atleast_1d(np.asarray(rhs, dtype=np.float64))))
        return self

    def add_soc(self, a_idx, bound, b_idx=None, center=None) -> "ConeProgram":
        """Cones ``||x[a_idx[k]] - x[b_idx[k]] - center[k]|| <= bound[k]``.

        ``a_idx``/``b_idx`` are ``[k, d]`` index arrays (a single ``[d]`` row
        is promoted); ``b_idx=None`` drops the second term.
        """
        a_idx = np.atleast_2d(np.asarray(a_idx, dtype=np.int64))
        b_idx = None if b_idx is None else np.atleast_2d(np.asarray(b_idx, dtype=np.int64))
        center = np.zeros(a_idx.shape) if center is None else np.broadcast_to(
            np.asarray(center, dtype=np.float64), a_idx.shape).copy()
        bound = np.broadcast_to(np.asarray(bound, dtype=np.float64), (a_idx.shape[0],)).copy()
        if b_idx is not None and b_idx.shape != a_idx.shape:
            raise ValueError(f"cone index blocks differ in shape: {a_idx.shape} vs {b_idx.shape}")
        self.soc_blocks.append(SocBlock(a_idx, b_idx, center, bound))
        return self

    def set_box(self, idx, lo, hi) -> "ConeProgram":
        self.lo[idx] = lo
        self.hi[idx] = hi
        return self

    def to_dict(self) -> dict:
        def dense(blocks):
            return [{"rows": b.toarray().tolist(), "rhs": r.tolist()} for b, r in blocks]

        return {
            "n": self.n,
            "objective": self.objective.tolist(),
            "lo": [None if not np.isfinite(v) else v for v in self.lo.tolist()],
            "hi": [None if not np.isfinite(v) else v for v in self.hi.tolist()],
            "eq": dense(self.eq_blocks),
            "ineq": dense(self.ineq_blocks),
            "soc": [{
                "a_idx": s.a_idx.tolist(),
                "b_idx": None if s.b_idx is None else s.b_idx.tolist(),
                "center": s.center.tolist(),
                "bound": s.bound.tolist(),
            } for s in self.soc_blocks],
        }

    def dump(self, path) -> Path:
        """Write the program as JSON for offline inspection."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))
        return path


@dataclass
class SolveResult:
    x: Optional[np.ndarray]
    objective: float
    status: str


def _cone_args(x: cp.Variable, block: SocBlock):
    cols = []
    for j in range(block.a_idx.shape[1]):
        expr = x[block.a_idx[:, j]]
        if block.b_idx is not None:
            expr = expr - x[block.b_idx[:, j]]
        cols.append(expr - block.center[:, j])
    return cp.vstack(cols)


def solve(prog: ConeProgram, start: Optional[np.ndarray] = None, tol: float = 1e-8,
          max_iter: int = 200) -> SolveResult:
    """Maximize the program with the Clarabel interior-point solver.

    Returns status ``optimal``, ``infeasible`` or ``max_iter``; on
    ``max_iter`` the best available point (or ``start``) is returned.
    """
    x = cp.Variable(prog.n)
    if start is not None:
        x.value = np.asarray(start, dtype=np.float64)
    constraints = []
    for block, rhs in prog.eq_blocks:
        constraints.append(block @ x == rhs)
    for block, rhs in prog.ineq_blocks:
        constraints.append(block @ x <= rhs)
    for block in prog.soc_blocks:
        constraints.append(cp.SOC(block.bound, _cone_args(x, block), axis=0))
    finite_lo = np.flatnonzero(np.isfinite(prog.lo))
    finite_hi = np.flatnonzero(np.isfinite(prog.hi))
    if finite_lo.size:
        constraints.append(x[finite_lo] >= prog.lo[finite_lo])
    if finite_hi.size:
        constraints.append(x[finite_hi] <= prog.hi[finite_hi])

    problem = cp.Problem(cp.Maximize(prog.objective @ x), constraints)
    try:
        problem.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol,
                      max_iter=max_iter)
    except cp.error.SolverError as e:
        logger.warning(f"cone program solve failed: {e}")
        return SolveResult(x=None if start is None else np.asarray(start, dtype=np.float64),
                           objective=float("nan"), status=STATUS_MAX_ITER)

    status = problem.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolveResult(x=None, objective=float("nan"), status=STATUS_INFEASIBLE)
    if status == cp.OPTIMAL and x.value is not None:
        return SolveResult(x=np.asarray(x.value, dtype=np.float64), objective=float(problem.value),
                           status=STATUS_OPTIMAL)
    if status == cp.OPTIMAL_INACCURATE and x.value is not None:
        logger.warning("cone program solved inaccurately")
        return SolveResult(x=np.asarray(x.value, dtype=np.float64), objective=float(problem.value),
                           status=STATUS_MAX_ITER)
    logger.warning(f"cone program ended with solver status {status}")
    best = x.value if x.value is not None else start
    return SolveResult(x=None if best is None else np.asarray(best, dtype=np.float64),
                       objective=float("nan"), status=STATUS_MAX_ITER)


def max_violation(prog: ConeProgram, x: np.ndarray) -> float:
    """Largest constraint violation of ``x``, computed without the solver."""
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0
    for block, rhs in prog.eq_blocks:
        worst = max(worst, float(np.max(np.abs(block @ x - rhs), initial=0.0)))
    for block, rhs in prog.ineq_blocks:
        worst = max(worst, float(np.max(block @ x - rhs, initial=0.0)))
    for s in prog.soc_blocks:
        diff = x[s.a_idx] - (x[s.b_idx] if s.b_idx is not None else 0.0) - s.center
        worst = max(worst, float(np.max(np.linalg.norm(diff, axis=1) - s.bound, initial=0.0)))
    worst = max(worst, float(np.max(prog.lo - x, initial=0.0)), float(np.max(x - prog.hi, initial=0.0)))
    return worst
