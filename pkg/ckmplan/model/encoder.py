"""
CNN environment encoder mapping the stacked input features to a feature map
eight times smaller along each spatial axis.
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ckmplan.errors import CacheError, SceneError
from ckmplan.model.numerics import DTYPE


@dataclass
class ConvStage:
    out_channels: int
    kernel_size: int
    padding: int
    residual_out: Optional[int] = None
    pool: bool = True


@dataclass
class EncoderConfig:
    in_channels: int = 5
    stages: List[ConvStage] = field(default_factory=list)

    @classmethod
    def ckan(cls, in_channels: int = 5) -> "EncoderConfig":
        return cls(in_channels, [
            ConvStage(16, 5, 2, 32),
            ConvStage(64, 3, 2, 128),
            ConvStage(64, 3, 1, 64),
        ])

    @classmethod
    def cmlp(cls, in_channels: int = 5) -> "EncoderConfig":
        return cls(in_channels, [
            ConvStage(16, 5, 2, 32),
            ConvStage(64, 3, 2, 128),
            ConvStage(128, 3, 1, 128),
        ])

    @classmethod
    def from_dict(cls, data: Dict) -> "EncoderConfig":
        return cls(data["in_channels"], [ConvStage(**s) for s in data["stages"]])

    def to_dict(self) -> Dict:
        return asdict(self)

    @property
    def d_out(self) -> int:
        last = self.stages[-1]
        return last.residual_out if last.residual_out is not None else last.out_channels

    @property
    def downsample(self) -> int:
        return 2 ** sum(1 for s in self.stages if s.pool)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a 1x1 projection shortcut when widths differ."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, dtype=DTYPE)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, dtype=DTYPE)
        self.shortcut = (nn.Conv2d(in_channels, out_channels, 1, dtype=DTYPE)
                         if in_channels != out_channels else nn.Identity())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.conv1(x))
        out = self.conv2(out)
        return F.relu(out + self.shortcut(x))


class CnnEncoder(nn.Module):
    """Environment feature encoder.

    Each stage is convolution, rectifier, optional residual block and
    optional 2x2 max pooling. A convolution whose padding grows the map is
    center-cropped back to its input size.

    The output of :meth:`encode` is cached so location queries reuse it.
    """

    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        self.config = config
        self.convs = nn.ModuleList()
        self.blocks = nn.ModuleList()
        channels = config.in_channels
        for stage in config.stages:
            self.convs.append(nn.Conv2d(channels, stage.out_channels, stage.kernel_size,
                                        padding=stage.padding, dtype=DTYPE))
            channels = stage.out_channels
            if stage.residual_out is not None:
                self.blocks.append(ResidualBlock(channels, stage.residual_out))
                channels = stage.residual_out
            else:
                self.blocks.append(nn.Identity())
        self.reset_parameters()
        self._cache: Optional[torch.Tensor] = None

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)

    @property
    def d_out(self) -> int:
        return self.config.d_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        factor = self.config.downsample
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise SceneError(f"input size {tuple(x.shape[-2:])} is not divisible by {factor}")
        x = x.to(DTYPE)
        for stage, conv, block in zip(self.config.stages, self.convs, self.blocks):
            h, w = x.shape[-2:]
            x = F.relu(conv(x))
            dh, dw = x.shape[-2] - h, x.shape[-1] - w
            if dh > 0 or dw > 0:
                x = x[..., dh // 2:dh // 2 + h, dw // 2:dw // 2 + w]
            x = block(x)
            if stage.pool:
                x = F.max_pool2d(x, 2)
        return x.squeeze(0) if squeeze else x

    def encode(self, stack_channels) -> torch.Tensor:
        """Run the encoder on ``[d_in, H, W]`` features and cache the result."""
        x = torch.as_tensor(stack_channels).to(DTYPE)
        self._cache = self.forward(x)
        return self._cache

    @property
    def cached_output(self) -> torch.Tensor:
        if self._cache is None:
            raise CacheError("encoder output is not cached, call encode() first")
        return self._cache

    def clear_cache(self) -> None:
        self._cache = None

    def encode_backward(self, upstream: torch.Tensor, retain_graph: bool = True) -> Dict[str, torch.Tensor]:
        """Parameter gradients of ``<upstream, cached output>``."""
        out = self.cached_output
        if not out.requires_grad:
            raise CacheError("cached encoder output carries no activations (encoded under no_grad)")
        names, params = zip(*self.named_parameters())
        grads = torch.autograd.grad(out, params, grad_outputs=upstream.to(DTYPE),
                                    retain_graph=retain_graph, allow_unused=True)
        return {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}
