"""
Binary grid files and their JSON sidecars.

A ``.grid`` file holds row-major little-endian IEEE-754 single precision
values. Its sidecar ``<name>.json`` records the layout:
``{rows, cols, resolution_m, quantity, units}`` and, for 3-D stacks,
``channels`` plus the ``channel_names`` list.
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ckmplan.constants import GRID_SUFFIX
from ckmplan.errors import SceneError

PathLike = Union[str, os.PathLike]


class GridSidecar(BaseModel):
    rows: int = Field(gt=0)
    cols: int = Field(gt=0)
    resolution_m: float = Field(gt=0)
    quantity: str
    units: str
    channels: Optional[int] = Field(default=None, gt=0)
    channel_names: Optional[List[str]] = None
    norm_params: Optional[List[Tuple[float, float]]] = None
    palette: Optional[Dict[str, Any]] = None
    dtype: str = "<f4"

    @model_validator(mode="after")
    def _check_channels(self):
        if self.channel_names is not None:
            if self.channels is None or len(self.channel_names) != self.channels:
                raise ValueError("channel_names must list exactly `channels` names")
        return self

    @property
    def shape(self) -> Tuple[int, ...]:
        if self.channels is None:
            return (self.rows, self.cols)
        return (self.channels, self.rows, self.cols)


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_grid(path: PathLike, values: np.ndarray, resolution_m: float, quantity: str, units: str,
              channel_names: Optional[List[str]] = None,
              norm_params: Optional[List[Tuple[float, float]]] = None,
              palette: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``values`` (2-D or 3-D) as a ``.grid`` file plus sidecar.

    Returns:
        Path of the written ``.grid`` file.
    """
    path = Path(path)
    if path.suffix != GRID_SUFFIX:
        path = path.with_suffix(GRID_SUFFIX)
    values = np.asarray(values)
    if values.ndim not in (2, 3):
        raise SceneError(f"grid values must be 2-D or 3-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise SceneError(f"refusing to write non-finite values to {path}")

    sidecar = GridSidecar(
        rows=values.shape[-2],
        cols=values.shape[-1],
        resolution_m=resolution_m,
        quantity=quantity,
        units=units,
        channels=values.shape[0] if values.ndim == 3 else None,
        channel_names=list(channel_names) if channel_names is not None else None,
        norm_params=[(float(lo), float(hi)) for lo, hi in norm_params] if norm_params is not None else None,
        palette=palette,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(values, dtype="<f4").tofile(path)
    sidecar_path(path).write_text(sidecar.model_dump_json(indent=2, exclude_none=True))
    return path


def load_grid(path: PathLike) -> Tuple[np.ndarray, GridSidecar]:
    path = Path(path)
    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise SceneError(f"missing sidecar {meta_file} for {path}")
    sidecar = GridSidecar.model_validate_json(meta_file.read_text())
    values = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(sidecar.shape))
    if values.size != expected:
        raise SceneError(f"{path} holds {values.size} values, sidecar expects {expected}")
    return values.reshape(sidecar.shape), sidecar


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        path.write_text(payload.model_dump_json(indent=2))
    else:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
