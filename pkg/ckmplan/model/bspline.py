"""
Clamped B-spline bases (Cox-de Boor recursion) and their derivatives.
"""
from typing import Tuple

import torch

from ckmplan.model.numerics import DTYPE


def uniform_knots(grid: int, order: int, lo: float = 0.0, hi: float = 1.0) -> torch.Tensor:
    """Clamped uniform knot vector of length ``grid + 2 * order - 1``.

    The first and last ``order`` knots coincide with ``lo`` and ``hi``.
    """
    if grid < 1 or order < 1:
        raise ValueError(f"grid and order must be >= 1, got grid={grid}, order={order}")
    interior = torch.linspace(lo, hi, grid + 1, dtype=DTYPE)[1:-1]
    return torch.cat([
        torch.full((order,), lo, dtype=DTYPE),
        interior,
        torch.full((order,), hi, dtype=DTYPE),
    ])


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    safe = torch.where(den == 0, torch.ones_like(den), den)
    return torch.where(den == 0, torch.zeros_like(num), num / safe)


def _order_one(v: torch.Tensor, knots: torch.Tensor) -> torch.Tensor:
    left, right = knots[:-1], knots[1:]
    v_ = v.unsqueeze(-1)
    basis = ((left <= v_) & (v_ < right)).to(DTYPE)
    # v at the right end belongs to the last non-empty span
    nonempty = torch.nonzero(right > left).flatten()
    last = int(nonempty[-1])
    at_end = (v_ >= knots[-1]).squeeze(-1)
    if at_end.any():
        basis[at_end] = 0.0
        basis[..., last][at_end] = 1.0
    return basis


def bspline_bases(v: torch.Tensor, knots: torch.Tensor, order: int) -> Tuple[torch.Tensor, ...]:
    """All bases up to ``order``.

    Returns:
        Tuple whose entry ``j - 1`` holds the order-``j`` bases with shape
        ``v.shape + (len(knots) - j,)``.
    """
    v = torch.clamp(v.to(DTYPE), float(knots[0]), float(knots[-1]))
    bases = [_order_one(v, knots)]
    v_ = v.unsqueeze(-1)
    for j in range(2, order + 1):
        prev = bases[-1]
        n = len(knots) - j
        t_m = knots[:n]
        t_mj1 = knots[j - 1:j - 1 + n]
        t_m1 = knots[1:1 + n]
        t_mj = knots[j:j + n]
        left = _safe_div(v_ - t_m, t_mj1 - t_m) * prev[..., :n]
        right = _safe_div(t_mj - v_, t_mj - t_m1) * prev[..., 1:n + 1]
        bases.append(left + right)
    return tuple(bases)


def bspline_basis(v: torch.Tensor, knots: torch.Tensor, order: int) -> torch.Tensor:
    """Order-``order`` bases at ``v``; out-of-domain values are clamped."""
    return bspline_bases(v, knots, order)[-1]


def bspline_basis_derivative(v: torch.Tensor, knots: torch.Tensor, order: int) -> torch.Tensor:
    """d B_{m,k} / dv from the order ``k - 1`` bases."""
    if order == 1:
        return torch.zeros(v.shape + (len(knots) - 1,), dtype=DTYPE)
    lower = bspline_bases(v, knots, order - 1)[-1]
    n = len(knots) - order
    k = order
    left = _safe_div(lower[..., :n], knots[k - 1:k - 1 + n] - knots[:n])
    right = _safe_div(lower[..., 1:n + 1], knots[k:k + n] - knots[1:1 + n])
    return (k - 1) * (left - right)
