"""
Location-aware regressors: bilinear feature sampling, the fully connected
head and the B-spline (Kolmogorov-Arnold) head, each with an input Jacobian.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ckmplan.model.bspline import bspline_basis, bspline_basis_derivative, uniform_knots
from ckmplan.model.numerics import DTYPE

REGRESSOR_KINDS = ("cmlp", "ckan", "mlp", "kan")


@dataclass
class RegressorConfig:
    kind: str
    widths: List[int] = field(default_factory=list)
    grid: int = 8
    order: int = 4

    @classmethod
    def for_kind(cls, kind: str, d_out: Optional[int] = None) -> "RegressorConfig":
        """Head configuration for ``kind``; conditional heads take ``d_out + 2`` inputs."""
        if kind == "cmlp":
            return cls(kind, [(128 if d_out is None else d_out) + 2, 128, 32, 1])
        if kind == "ckan":
            return cls(kind, [(64 if d_out is None else d_out) + 2, 10, 1], grid=8, order=4)
        if kind == "mlp":
            return cls(kind, [2, 64, 128, 64, 32, 1])
        if kind == "kan":
            return cls(kind, [2, 10, 20, 10, 1], grid=10, order=4)
        raise ValueError(f"Unknown regressor kind: {kind}")

    @property
    def conditional(self) -> bool:
        return self.kind.startswith("c")

    @property
    def is_kan(self) -> bool:
        return self.kind.endswith("kan")

    def to_dict(self) -> Dict:
        return asdict(self)


def bilinear_sample(feature_map: torch.Tensor, qbar: torch.Tensor,
                    with_grad: bool = False) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Sample ``[C, H, W]`` features at unit-square locations ``[B, 2]``.

    ``qbar`` is mapped through ``2 * qbar - 1`` onto the corner-aligned grid,
    so ``(0, 0)`` and ``(1, 1)`` hit the first and last feature nodes.
    Locations are clamped to the map border.

    Returns:
        ``(s, ds)`` with ``s`` of shape ``[B, C]`` and, when ``with_grad``,
        ``ds = d s / d qbar`` of shape ``[B, C, 2]``. On a cell boundary the
        right-limit derivative is returned.
    """
    qbar = qbar.to(DTYPE).reshape(-1, 2)
    _, h, w = feature_map.shape
    qp = 2.0 * qbar - 1.0
    fx = (torch.clamp(qp[:, 0], -1.0, 1.0) + 1.0) * 0.5 * (h - 1)
    fy = (torch.clamp(qp[:, 1], -1.0, 1.0) + 1.0) * 0.5 * (w - 1)
    i = torch.clamp(torch.floor(fx).long(), 0, max(h - 2, 0))
    j = torch.clamp(torch.floor(fy).long(), 0, max(w - 2, 0))
    i1 = torch.clamp(i + 1, max=h - 1)
    j1 = torch.clamp(j + 1, max=w - 1)
    mu = (fx - i).unsqueeze(1)
    nu = (fy - j).unsqueeze(1)

    c00 = feature_map[:, i, j].T
    c10 = feature_map[:, i1, j].T
    c01 = feature_map[:, i, j1].T
    c11 = feature_map[:, i1, j1].T
    s = (1 - mu) * (1 - nu) * c00 + mu * (1 - nu) * c10 + (1 - mu) * nu * c01 + mu * nu * c11
    if not with_grad:
        return s, None

    # d fx / d qbar_x = 2 * (h - 1) / 2
    ds_dx = (h - 1) * ((1 - nu) * (c10 - c00) + nu * (c11 - c01))
    ds_dy = (w - 1) * ((1 - mu) * (c01 - c00) + mu * (c11 - c10))
    return s, torch.stack([ds_dx, ds_dy], dim=-1)


class MlpRegressor(nn.Module):
    """Fully connected head, rectifier between layers and a linear output."""

    def __init__(self, widths: List[int]) -> None:
        super().__init__()
        self.widths = list(widths)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for idx, layer in enumerate(self.layers):
            x = layer(x)
            if idx < len(self.layers) - 1:
                x = F.relu(x)
        return x.squeeze(-1)

    def forward_with_jacobian(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Output ``[B]`` and ``d out / d x`` of shape ``[B, n_in]``."""
        jac = None
        for idx, layer in enumerate(self.layers):
            x = layer(x)
            w = layer.weight.unsqueeze(0)
            jac = w.expand(x.shape[0], -1, -1) if jac is None else w @ jac
            if idx < len(self.layers) - 1:
                active = (x > 0).to(DTYPE).unsqueeze(-1)
                x = F.relu(x)
                jac = jac * active
        return x.squeeze(-1), jac[:, 0, :]


class KanLayer(nn.Module):
    """One layer of learnable univariate B-spline edges summed at each node.

    Inputs reach the knot domain through ``v = (1 + tanh(u)) / 2`` with
    ``u = (x - center) / half_span``. While ``tracking`` is on (first training
    epoch) ``center`` and ``half_span`` follow the running min/max of the
    inputs; afterwards they are frozen. The tracked range lands on
    ``[0.12, 0.88]`` of the knot domain and values beyond it are compressed
    towards the ends, never clamped, so the Jacobian stays non-zero.
    """

    min_half_span = 0.5

    def __init__(self, n_in: int, n_out: int, grid: int, order: int) -> None:
        super().__init__()
        self.n_in, self.n_out, self.grid, self.order = n_in, n_out, grid, order
        self.register_buffer("knots", uniform_knots(grid, order))
        bound = 0.1 / math.sqrt(n_in)
        self.coef = nn.Parameter(
            torch.empty(n_in, n_out, grid + order - 1, dtype=DTYPE).uniform_(-bound, bound))
        self.register_buffer("domain_lo", torch.zeros(n_in, dtype=DTYPE))
        self.register_buffer("domain_hi", torch.ones(n_in, dtype=DTYPE))
        self.register_buffer("observed", torch.zeros((), dtype=DTYPE))
        self.tracking = False

    def observe(self, x: torch.Tensor) -> None:
        """Widen the tracked range to cover ``x``."""
        lo = x.detach().min(dim=0).values
        hi = x.detach().max(dim=0).values
        if self.observed.item() == 0:
            self.domain_lo.copy_(lo)
            self.domain_hi.copy_(hi)
            self.observed.fill_(1.0)
        else:
            self.domain_lo.copy_(torch.minimum(self.domain_lo, lo))
            self.domain_hi.copy_(torch.maximum(self.domain_hi, hi))

    def _scale(self) -> Tuple[torch.Tensor, torch.Tensor]:
        center = 0.5 * (self.domain_lo + self.domain_hi)
        half_span = torch.clamp(0.5 * (self.domain_hi - self.domain_lo), min=self.min_half_span)
        return center, half_span

    def to_knot_domain(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Knot-domain values ``v`` in ``(0, 1)`` and ``dv / dx``."""
        center, half_span = self._scale()
        t = torch.tanh((x - center) / half_span)
        return 0.5 * (1.0 + t), 0.5 * (1.0 - t * t) / half_span

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.tracking and self.training:
            self.observe(x)
        v, _ = self.to_knot_domain(x)
        basis = bspline_basis(v, self.knots, self.order)
        return torch.einsum("bim,iom->bo", basis, self.coef)

    def forward_with_jacobian(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Output ``[B, n_out]`` and ``d out / d x`` of shape ``[B, n_out, n_in]``."""
        v, dv = self.to_knot_domain(x)
        basis = bspline_basis(v, self.knots, self.order)
        dbasis = bspline_basis_derivative(v, self.knots, self.order)
        out = torch.einsum("bim,iom->bo", basis, self.coef)
        jac = torch.einsum("bim,iom->boi", dbasis, self.coef) * dv.unsqueeze(1)
        return out, jac


class KanRegressor(nn.Module):
    def __init__(self, widths: List[int], grid: int, order: int) -> None:
        super().__init__()
        self.widths = list(widths)
        self.layers = nn.ModuleList(
            KanLayer(a, b, grid, order) for a, b in zip(widths[:-1], widths[1:]))

    def set_tracking(self, tracking: bool) -> None:
        for layer in self.layers:
            layer.tracking = tracking

    @torch.no_grad()
    def observe(self, x: torch.Tensor) -> None:
        """Widen every layer's tracked range with the activations of ``x``."""
        for layer in self.layers:
            layer.observe(x)
            x = layer(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x.squeeze(-1)

    def forward_with_jacobian(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        jac = None
        for layer in self.layers:
            x, layer_jac = layer.forward_with_jacobian(x)
            jac = layer_jac if jac is None else layer_jac @ jac
        return x.squeeze(-1), jac[:, 0, :]


def build_regressor(config: RegressorConfig) -> nn.Module:
    if config.kind not in REGRESSOR_KINDS:
        raise ValueError(f"Unknown regressor kind: {config.kind}")
    if config.is_kan:
        return KanRegressor(config.widths, config.grid, config.order)
    return MlpRegressor(config.widths)


def count_parameters(module: nn.Module) -> int:
    """Number of learnable scalars."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
