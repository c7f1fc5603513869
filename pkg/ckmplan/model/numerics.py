"""
Double precision numerics shared by the encoder, the regressors and training:
finite-difference gradient checks, the Adam parameter store and the
named-tensor checkpoint format.
"""
import json
import struct
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from ckmplan.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from ckmplan.errors import NumericalError, SceneError

DTYPE = torch.float64


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5,
               grad: Optional[torch.Tensor] = None) -> float:
    """Compare an analytic gradient against central differences.

    Args:
        f: scalar function of ``x``.
        x: evaluation point.
        eps: finite-difference step.
        grad: analytic gradient at ``x``; computed with autograd when omitted.

    Returns:
        max over coordinates of ``|analytic - fd| / max(1, |fd|)``.
    """
    x = x.detach().to(DTYPE)
    if grad is None:
        xr = x.clone().requires_grad_(True)
        out = f(xr)
        if not torch.isfinite(out).all():
            raise NumericalError(f"function value is not finite: {out}")
        (grad,) = torch.autograd.grad(out, xr, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(x)
    grad = torch.as_tensor(grad, dtype=DTYPE).reshape(x.shape)

    flat = x.reshape(-1)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += eps
            minus[i] -= eps
            f_plus = f(plus.reshape(x.shape))
            f_minus = f(minus.reshape(x.shape))
            if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                raise NumericalError(f"non-finite function value around coordinate {i}")
            fd[i] = (f_plus - f_minus) / (2.0 * eps)
    err = (grad.reshape(-1) - fd).abs() / torch.clamp(fd.abs(), min=1.0)
    return float(err.max()) if err.numel() else 0.0


class ParamStore:
    """Named parameters and their Adam state.

    The moments live in a ``torch.optim.Adam`` instance; the step counter is
    shared by every parameter of the store.
    """

    def __init__(self, params: Dict[str, torch.Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = dict(params)
        self.optimizer = torch.optim.Adam(list(self.params.values()), lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module, **kwargs) -> "ParamStore":
        return cls(dict(module.named_parameters()), **kwargs)

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        state = self.optimizer.state[self.params[name]]
        return state["exp_avg"], state["exp_avg_sq"]


def adam_step(store: ParamStore, grads: Optional[Dict[str, torch.Tensor]] = None,
              lr: Optional[float] = None, beta1: Optional[float] = None,
              beta2: Optional[float] = None, eps: Optional[float] = None) -> ParamStore:
    """One bias-corrected Adam update.

    ``grads`` overrides the ``.grad`` fields already populated by a
    backward pass. Hyperparameters given here replace the store's for this
    and later steps.
    """
    group = store.optimizer.param_groups[0]
    if lr is not None:
        group["lr"] = lr
    if beta1 is not None or beta2 is not None:
        b1, b2 = group["betas"]
        group["betas"] = (b1 if beta1 is None else beta1, b2 if beta2 is None else beta2)
    if eps is not None:
        group["eps"] = eps

    if grads is not None:
        for name, g in grads.items():
            if name not in store.params:
                raise KeyError(f"unknown parameter {name!r}")
            p = store.params[name]
            if tuple(g.shape) != tuple(p.shape):
                raise ValueError(f"gradient for {name!r} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            p.grad = g.detach().to(p.dtype).clone()
    for name, p in store.params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient for {name!r}")

    store.optimizer.step()
    store.step_count += 1
    return store


class TensorEntry(BaseModel):
    name: str
    shape: List[int]


class CheckpointManifest(BaseModel):
    version: int = CHECKPOINT_VERSION
    dtype: str = "float64"
    tensors: List[TensorEntry]
    metadata: Dict[str, Any] = {}


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``MAGIC | u32 manifest length | manifest JSON | (u64 length | f64 data)*``."""
    path = Path(path)
    manifest = CheckpointManifest(
        tensors=[TensorEntry(name=k, shape=list(v.shape)) for k, v in tensors.items()],
        metadata=metadata or {},
    )
    header = manifest.model_dump_json().encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for value in tensors.values():
            data = np.ascontiguousarray(value.detach().cpu().numpy(), dtype="<f8").tobytes()
            f.write(struct.pack("<Q", len(data)))
            f.write(data)
    return path


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise SceneError(f"{path} is not a ckmplan checkpoint")
        (length,) = struct.unpack("<I", f.read(4))
        manifest = CheckpointManifest.model_validate(json.loads(f.read(length).decode("utf-8")))
        if manifest.version != CHECKPOINT_VERSION:
            raise SceneError(f"unsupported checkpoint version {manifest.version}")
        tensors = {}
        for entry in manifest.tensors:
            (nbytes,) = struct.unpack("<Q", f.read(8))
            expected = 8 * int(np.prod(entry.shape, dtype=np.int64))
            if nbytes != expected:
                raise SceneError(f"tensor {entry.name!r} holds {nbytes} bytes, expected {expected}")
            array = np.frombuffer(f.read(nbytes), dtype="<f8").reshape(entry.shape)
            tensors[entry.name] = torch.from_numpy(array.copy())
    return tensors, manifest.metadata
