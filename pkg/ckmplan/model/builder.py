"""
CkmModel: the encoder and location-aware regressor bundled with the scene
extent, the target normalization and the cached encoder output.
"""
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from ckmplan.errors import CacheError, SceneError
from ckmplan.features import Extent, FeatureStack, location_jacobian, normalize_location
from ckmplan.model.encoder import CnnEncoder, EncoderConfig
from ckmplan.model.numerics import DTYPE, load_checkpoint, save_checkpoint
from ckmplan.model.regressor import KanRegressor, RegressorConfig, bilinear_sample, build_regressor

logger = logging.getLogger(__name__)

_LN10_OVER_10 = np.log(10.0) / 10.0


class CkmModel(nn.Module):
    """Differentiable channel knowledge map ``q -> H(q)``.

    Predictions live in the normalized dB target domain; ``target_norm``
    holds the ``(min, max)`` dB range used to denormalize them.
    """

    def __init__(self, regressor_config: RegressorConfig, extent: Extent,
                 target_norm: Tuple[float, float],
                 encoder_config: Optional[EncoderConfig] = None) -> None:
        super().__init__()
        self.regressor_config = regressor_config
        self.encoder_config = encoder_config
        self.extent = tuple(tuple(float(v) for v in axis) for axis in extent)
        self.target_norm = (float(target_norm[0]), float(target_norm[1]))
        self.encoder = CnnEncoder(encoder_config) if regressor_config.conditional else None
        if self.encoder is not None and regressor_config.widths[0] != encoder_config.d_out + 2:
            raise ValueError(
                f"regressor input width {regressor_config.widths[0]} != encoder d_out + 2 "
                f"({encoder_config.d_out + 2})")
        self.regressor = build_regressor(regressor_config)
        self.feature_map: Optional[torch.Tensor] = None
        self.stack_channels: Optional[torch.Tensor] = None

    @property
    def kind(self) -> str:
        return self.regressor_config.kind

    @property
    def conditional(self) -> bool:
        return self.regressor_config.conditional

    def encode(self, stack: Optional[FeatureStack] = None) -> Optional[torch.Tensor]:
        """Encode (and cache) the feature stack; a no-op for coordinate-only kinds."""
        if not self.conditional:
            return None
        if stack is not None:
            self.stack_channels = torch.as_tensor(np.asarray(stack.channels), dtype=DTYPE)
        if self.stack_channels is None:
            raise CacheError("no feature stack to encode")
        self.feature_map = self.encoder.encode(self.stack_channels)
        return self.feature_map

    def _inputs(self, qbar: torch.Tensor, with_grad: bool = False):
        qbar = qbar.to(DTYPE).reshape(-1, 2)
        if not self.conditional:
            return qbar, None
        if self.feature_map is None:
            raise CacheError("encoder output is not cached, call encode() first")
        s, ds = bilinear_sample(self.feature_map, qbar, with_grad=with_grad)
        return torch.cat([qbar, s], dim=1), ds

    def forward(self, qbar: torch.Tensor) -> torch.Tensor:
        """Normalized dB prediction for ``[B, 2]`` unit-square locations."""
        u, _ = self._inputs(qbar)
        return self.regressor(u)

    @torch.no_grad()
    def observe_domain(self, qbar) -> None:
        """Widen the KAN spline ranges to cover the head inputs at ``qbar``."""
        if not isinstance(self.regressor, KanRegressor):
            return
        u, _ = self._inputs(torch.as_tensor(np.asarray(qbar, dtype=np.float64)))
        self.regressor.observe(u)

    @torch.no_grad()
    def predict_gain(self, qbar) -> np.ndarray:
        return self.forward(torch.as_tensor(np.asarray(qbar, dtype=np.float64))).numpy()

    @torch.no_grad()
    def gain_gradient(self, qbar) -> np.ndarray:
        """Analytic ``d H / d qbar`` of shape ``[B, 2]`` in the normalized dB domain."""
        u, ds = self._inputs(torch.as_tensor(np.asarray(qbar, dtype=np.float64)), with_grad=True)
        _, jac = self.regressor.forward_with_jacobian(u)
        grad = jac[:, :2].clone()
        if ds is not None:
            grad = grad + torch.einsum("bc,bcd->bd", jac[:, 2:], ds)
        return grad.numpy()

    def denormalize_db(self, values):
        lo, hi = self.target_norm
        return lo + np.asarray(values) * (hi - lo)

    def gain_linear(self, q_m: np.ndarray) -> np.ndarray:
        """Linear power gain at positions in meters ``[B, 2]``."""
        qbar = normalize_location(np.atleast_2d(q_m), self.extent)
        return np.power(10.0, self.denormalize_db(self.predict_gain(qbar)) / 10.0)

    def gain_linear_gradient(self, q_m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Linear gain ``[B]`` and its gradient in meters ``[B, 2]``."""
        q_m = np.atleast_2d(q_m)
        qbar = normalize_location(q_m, self.extent)
        lo, hi = self.target_norm
        gain = np.power(10.0, self.denormalize_db(self.predict_gain(qbar)) / 10.0)
        grad_bar = self.gain_gradient(qbar)
        grad = (gain * _LN10_OVER_10 * (hi - lo))[:, None] * (grad_bar @ location_jacobian(self.extent))
        return gain, grad

    def save(self, path) -> Path:
        tensors = {k: v for k, v in self.state_dict().items()}
        if self.feature_map is not None:
            tensors["cache.feature_map"] = self.feature_map.detach()
        if self.stack_channels is not None:
            tensors["cache.stack_channels"] = self.stack_channels
        metadata = {
            "regressor": self.regressor_config.to_dict(),
            "encoder": self.encoder_config.to_dict() if self.encoder_config is not None else None,
            "extent": self.extent,
            "target_norm": self.target_norm,
        }
        return save_checkpoint(path, tensors, metadata)


def build_model(kind: str, extent: Extent, target_norm: Tuple[float, float],
                d_in: int = 5, seed: Optional[int] = None) -> CkmModel:
    """Fresh model of ``kind`` (one of cmlp, ckan, mlp, kan)."""
    if seed is not None:
        torch.manual_seed(seed)
    encoder_config = None
    if kind == "ckan":
        encoder_config = EncoderConfig.ckan(d_in)
    elif kind == "cmlp":
        encoder_config = EncoderConfig.cmlp(d_in)
    d_out = encoder_config.d_out if encoder_config is not None else None
    return CkmModel(RegressorConfig.for_kind(kind, d_out), extent, target_norm, encoder_config)


def load_model(path) -> CkmModel:
    tensors, metadata = load_checkpoint(path)
    try:
        regressor_config = RegressorConfig(**metadata["regressor"])
        encoder_config = (EncoderConfig.from_dict(metadata["encoder"])
                          if metadata.get("encoder") is not None else None)
        model = CkmModel(regressor_config, metadata["extent"], metadata["target_norm"], encoder_config)
    except (KeyError, TypeError) as e:
        raise SceneError(f"checkpoint {path} has an invalid manifest: {e}") from e
    feature_map = tensors.pop("cache.feature_map", None)
    stack_channels = tensors.pop("cache.stack_channels", None)
    model.load_state_dict(tensors)
    model.feature_map = feature_map
    model.stack_channels = stack_channels
    model.eval()
    logger.info(f"Loaded {model.kind} model from {path}")
    return model
