"""
Synthetic urban scenes and the deterministic ground-truth channel oracle.

Grid convention: axis 0 (rows) runs along x, axis 1 (cols) along y, and
cell ``(i, j)`` has its center at ``((i + 0.5) * res, (j + 0.5) * res)``.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from ckmplan.constants import (
    DEFAULT_BS_HEIGHT_M,
    DEFAULT_UAV_HEIGHT_M,
    NLOS_PENALTY,
    REFLECTION_COEFF,
    SPEED_OF_LIGHT,
)
from ckmplan.errors import SceneError
from ckmplan.grid_io import PathLike, load_grid, save_grid, write_json

logger = logging.getLogger(__name__)

# (row_start, col_start, row_stop, col_stop, height_m), stops exclusive
Building = Tuple[int, int, int, int, float]
Obstacle = Tuple[Tuple[float, float], float]

_HEIGHT_TOL = 1e-9
_TRACE_CHUNK = 2048


def _cell_count(extent_m: float, resolution_m: float) -> int:
    if resolution_m <= 0 or extent_m <= 0:
        raise SceneError(f"extent ({extent_m}) and resolution ({resolution_m}) must be positive")
    n = extent_m / resolution_m
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise SceneError(f"extent {extent_m} m is not an integral number of {resolution_m} m cells")
    return int(round(n))


@dataclass(frozen=True, eq=False)
class EnvironmentScene:
    width_m: float
    depth_m: float
    resolution_m: float
    heights: np.ndarray
    bs_xy: Tuple[float, float]
    bs_height_m: float = DEFAULT_BS_HEIGHT_M
    uav_height_m: float = DEFAULT_UAV_HEIGHT_M
    obstacles: Tuple[Obstacle, ...] = ()
    rng_seed: int = 0
    buildings: Tuple[Building, ...] = ()
    _labels: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rows = _cell_count(self.width_m, self.resolution_m)
        cols = _cell_count(self.depth_m, self.resolution_m)
        heights = np.asarray(self.heights, dtype=np.float64)
        if heights.shape != (rows, cols):
            raise SceneError(f"heights shape {heights.shape} does not match ({rows}, {cols}) cells")
        if np.any(heights < 0) or not np.all(np.isfinite(heights)):
            raise SceneError("building heights must be finite and non-negative")
        x, y = self.bs_xy
        if not (0.0 <= x <= self.width_m and 0.0 <= y <= self.depth_m):
            raise SceneError(f"base station {self.bs_xy} lies outside the scene extent")
        heights.setflags(write=False)
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "bs_xy", (float(x), float(y)))

        labels = np.full((rows, cols), -1, dtype=np.int64)
        for idx, (r0, c0, r1, c1, _) in enumerate(self.buildings):
            labels[r0:r1, c0:c1] = idx
        labels.setflags(write=False)
        object.__setattr__(self, "_labels", labels)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.heights.shape

    @property
    def labels(self) -> np.ndarray:
        """Building index per cell, -1 for free cells."""
        return self._labels

    @property
    def extent(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        return (0.0, self.width_m), (0.0, self.depth_m)

    def cell_centers(self) -> np.ndarray:
        """Array ``[rows, cols, 2]`` of cell-center coordinates in meters."""
        rows, cols = self.shape
        xs = (np.arange(rows) + 0.5) * self.resolution_m
        ys = (np.arange(cols) + 0.5) * self.resolution_m
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def cell_of(self, xy) -> Tuple[int, int]:
        rows, cols = self.shape
        i = min(max(int(math.floor(xy[0] / self.resolution_m)), 0), rows - 1)
        j = min(max(int(math.floor(xy[1] / self.resolution_m)), 0), cols - 1)
        return i, j


def obstacle_disk(building: Building, resolution_m: float) -> Obstacle:
    r0, c0, r1, c1, _ = building
    cx = 0.5 * (r0 + r1) * resolution_m
    cy = 0.5 * (c0 + c1) * resolution_m
    radius = 0.5 * math.hypot((r1 - r0) * resolution_m, (c1 - c0) * resolution_m)
    return (cx, cy), radius


def scene_from_buildings(extent_m: float, resolution_m: float, buildings: Sequence[Building],
                         bs_xy: Tuple[float, float], bs_height_m: float = DEFAULT_BS_HEIGHT_M,
                         uav_height_m: float = DEFAULT_UAV_HEIGHT_M, rng_seed: int = 0,
                         depth_m: Optional[float] = None) -> EnvironmentScene:
    """Assemble a scene from explicit rectangular footprints."""
    depth_m = extent_m if depth_m is None else depth_m
    rows = _cell_count(extent_m, resolution_m)
    cols = _cell_count(depth_m, resolution_m)
    heights = np.zeros((rows, cols), dtype=np.float64)
    normalized = []
    for r0, c0, r1, c1, h in buildings:
        if not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
            raise SceneError(f"footprint {(r0, c0, r1, c1)} is outside the {rows}x{cols} grid")
        heights[r0:r1, c0:c1] = np.maximum(heights[r0:r1, c0:c1], h)
        normalized.append((int(r0), int(c0), int(r1), int(c1), float(h)))
    obstacles = tuple(obstacle_disk(b, resolution_m) for b in normalized)
    return EnvironmentScene(
        width_m=extent_m,
        depth_m=depth_m,
        resolution_m=resolution_m,
        heights=heights,
        bs_xy=bs_xy,
        bs_height_m=bs_height_m,
        uav_height_m=uav_height_m,
        obstacles=obstacles,
        rng_seed=rng_seed,
        buildings=tuple(normalized),
    )


def generate_scene(seed: int, extent_m: float, resolution_m: float, building_count: int,
                   height_range_m: Tuple[float, float],
                   bs_height_m: float = DEFAULT_BS_HEIGHT_M,
                   uav_height_m: float = DEFAULT_UAV_HEIGHT_M) -> EnvironmentScene:
    """Place ``building_count`` disjoint rectangular buildings by rejection sampling.

    Footprints are 4 to 12 cells per side (capped by the grid) and keep at
    least one free cell between each other.

    Raises:
        SceneError: if more than ``10 * building_count`` draws are needed.
    """
    if building_count < 0:
        raise SceneError(f"building_count must be >= 0, got {building_count}")
    lo_h, hi_h = height_range_m
    if lo_h < 0 or hi_h < lo_h:
        raise SceneError(f"invalid height range {height_range_m}")
    n = _cell_count(extent_m, resolution_m)
    rng = np.random.default_rng(seed)

    min_side, max_side = min(4, n), min(12, n)
    occupied = np.zeros((n, n), dtype=bool)
    buildings: List[Building] = []
    attempts = 0
    while len(buildings) < building_count:
        if attempts >= 10 * building_count:
            raise SceneError(
                f"scene too dense: placed {len(buildings)} of {building_count} buildings "
                f"after {attempts} attempts")
        attempts += 1
        h_cells, w_cells = rng.integers(min_side, max_side + 1, size=2)
        r0 = int(rng.integers(0, n - h_cells + 1))
        c0 = int(rng.integers(0, n - w_cells + 1))
        r1, c1 = r0 + int(h_cells), c0 + int(w_cells)
        if occupied[max(r0 - 1, 0):r1 + 1, max(c0 - 1, 0):c1 + 1].any():
            continue
        occupied[r0:r1, c0:c1] = True
        buildings.append((r0, c0, r1, c1, float(rng.uniform(lo_h, hi_h))))

    free = np.flatnonzero(~occupied)
    if free.size == 0:
        raise SceneError("scene too dense: no free cell left for the base station")
    bs_cell = int(free[rng.integers(0, free.size)])
    bi, bj = divmod(bs_cell, n)
    bs_xy = ((bi + 0.5) * resolution_m, (bj + 0.5) * resolution_m)

    logger.info(f"Generated scene seed={seed} with {len(buildings)} buildings in {attempts} draws")
    return scene_from_buildings(extent_m, resolution_m, buildings, bs_xy,
                                bs_height_m=bs_height_m, uav_height_m=uav_height_m, rng_seed=seed)


def trace_segments(scene: EnvironmentScene, targets_xy: np.ndarray,
                   target_height_m: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Walk the BS-to-target segments through every crossed cell.

    A cell blocks a segment when its building is taller than the lowest
    point of the segment inside that cell. Only cells crossed over a
    positive length count.

    Args:
        targets_xy: ``[n, 2]`` horizontal target positions in meters.
        target_height_m: target altitude, defaults to the UAV altitude.

    Returns:
        ``(los, blockers)``: boolean LoS flags and the number of distinct
        buildings blocking each segment.
    """
    targets_xy = np.atleast_2d(np.asarray(targets_xy, dtype=np.float64))
    z_target = scene.uav_height_m if target_height_m is None else target_height_m
    rows, cols = scene.shape
    res = scene.resolution_m
    xb, yb = scene.bs_xy
    zb = scene.bs_height_m
    x_lines = np.arange(rows + 1) * res
    y_lines = np.arange(cols + 1) * res

    los = np.ones(len(targets_xy), dtype=bool)
    blockers = np.zeros(len(targets_xy), dtype=np.int64)
    for start in range(0, len(targets_xy), _TRACE_CHUNK):
        chunk = targets_xy[start:start + _TRACE_CHUNK]
        dx = chunk[:, 0:1] - xb
        dy = chunk[:, 1:2] - yb
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(dx != 0, (x_lines[None, :] - xb) / dx, 1.0)
            ty = np.where(dy != 0, (y_lines[None, :] - yb) / dy, 1.0)
        breaks = np.concatenate(
            [np.zeros((len(chunk), 1)), np.clip(tx, 0.0, 1.0), np.clip(ty, 0.0, 1.0),
             np.ones((len(chunk), 1))], axis=1)
        breaks.sort(axis=1)
        ta, tb = breaks[:, :-1], breaks[:, 1:]
        crossed = (tb - ta) > 1e-12
        tm = 0.5 * (ta + tb)
        ri = np.clip(np.floor((xb + tm * dx) / res).astype(np.int64), 0, rows - 1)
        ci = np.clip(np.floor((yb + tm * dy) / res).astype(np.int64), 0, cols - 1)
        z_low = np.minimum(zb + ta * (z_target - zb), zb + tb * (z_target - zb))
        blocking = crossed & (scene.heights[ri, ci] > z_low + _HEIGHT_TOL)

        los[start:start + len(chunk)] = ~blocking.any(axis=1)
        lab = np.where(blocking, scene.labels[ri, ci], -1)
        # untracked footprints (height without a building record) count once
        lab = np.where(blocking & (lab < 0), len(scene.buildings), lab)
        lab.sort(axis=1)
        distinct = (lab[:, 1:] != lab[:, :-1]) & (lab[:, 1:] >= 0)
        blockers[start:start + len(chunk)] = distinct.sum(axis=1) + (lab[:, 0] >= 0)
    return los, blockers


def compute_los_map(scene: EnvironmentScene) -> np.ndarray:
    """Binary LoS map at UAV altitude, 1 where the BS segment clears every building."""
    los, _ = trace_segments(scene, scene.cell_centers().reshape(-1, 2))
    return los.reshape(scene.shape).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class GroundTruthCkm:
    gains: np.ndarray
    gains_db: np.ndarray
    frequency_hz: float
    resolution_m: float

    @classmethod
    def from_gains(cls, gains: np.ndarray, frequency_hz: float, resolution_m: float) -> "GroundTruthCkm":
        gains = np.asarray(gains, dtype=np.float64)
        if not np.all(gains > 0):
            raise SceneError("channel gains must be strictly positive")
        return cls(gains=gains, gains_db=10.0 * np.log10(gains),
                   frequency_hz=frequency_hz, resolution_m=resolution_m)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gains.shape


def _free_space_amplitude(distance: np.ndarray, frequency_hz: float) -> np.ndarray:
    return SPEED_OF_LIGHT / (4.0 * math.pi * distance * frequency_hz)


def _reflection_power(scene: EnvironmentScene, centers: np.ndarray, frequency_hz: float) -> np.ndarray:
    """Summed power of single specular reflections off walls facing both endpoints."""
    res = scene.resolution_m
    xb, yb = scene.bs_xy
    zb, zu = scene.bs_height_m, scene.uav_height_m
    xt, yt = centers[:, 0], centers[:, 1]
    power = np.zeros(len(centers))
    for r0, c0, r1, c1, h in scene.buildings:
        x0, x1, y0, y1 = r0 * res, r1 * res, c0 * res, c1 * res
        # (axis, plane coordinate, outward sign, span along the other axis)
        walls = ((0, x0, -1.0, (y0, y1)), (0, x1, 1.0, (y0, y1)),
                 (1, y0, -1.0, (x0, x1)), (1, y1, 1.0, (x0, x1)))
        for axis, plane, sign, (lo, hi) in walls:
            src_n, src_t = (xb, yb) if axis == 0 else (yb, xb)
            tgt_n, tgt_t = (xt, yt) if axis == 0 else (yt, xt)
            if sign * (src_n - plane) <= 0:
                continue
            facing = sign * (tgt_n - plane) > 0
            image_n = 2.0 * plane - src_n
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (plane - image_n) / (tgt_n - image_n)
            hit_t = src_t + s * (tgt_t - src_t)
            hit_z = zb + s * (zu - zb)
            valid = facing & (hit_t >= lo) & (hit_t <= hi) & (hit_z >= 0.0) & (hit_z <= h)
            if not valid.any():
                continue
            dist = np.sqrt((tgt_n - image_n) ** 2 + (tgt_t - src_t) ** 2 + (zu - zb) ** 2)
            amp = REFLECTION_COEFF * _free_space_amplitude(dist, frequency_hz)
            power += np.where(valid, amp ** 2, 0.0)
    return power


def compute_ground_truth_ckm(scene: EnvironmentScene, frequency_hz: float,
                             n_reflections: int = 0) -> GroundTruthCkm:
    """Expected channel power gain at UAV altitude for every cell.

    The direct path carries free-space amplitude scaled by the NLoS penalty
    once per blocking building; with ``n_reflections=1`` one specular image
    path per wall facing both endpoints is added. Phases are averaged out,
    so the gain is the sum of squared path amplitudes.
    """
    if frequency_hz <= 0:
        raise SceneError(f"frequency must be positive, got {frequency_hz}")
    if n_reflections not in (0, 1):
        raise SceneError(f"n_reflections must be 0 or 1, got {n_reflections}")

    centers = scene.cell_centers().reshape(-1, 2)
    _, blockers = trace_segments(scene, centers)
    horizontal = np.hypot(centers[:, 0] - scene.bs_xy[0], centers[:, 1] - scene.bs_xy[1])
    distance = np.hypot(horizontal, scene.uav_height_m - scene.bs_height_m)
    distance = np.maximum(distance, 0.5 * scene.resolution_m)

    amplitude = _free_space_amplitude(distance, frequency_hz) * np.power(NLOS_PENALTY, blockers)
    gains = amplitude ** 2
    if n_reflections == 1:
        gains = gains + _reflection_power(scene, centers, frequency_hz)
    return GroundTruthCkm.from_gains(gains.reshape(scene.shape), frequency_hz, scene.resolution_m)


class SceneRecord(BaseModel):
    width_m: float
    depth_m: float
    resolution_m: float
    heights: List[List[float]]
    bs_xy: Tuple[float, float]
    bs_height_m: float
    uav_height_m: float
    obstacles: List[Tuple[Tuple[float, float], float]]
    rng_seed: int
    buildings: List[Tuple[int, int, int, int, float]]


def save_scene(path: PathLike, scene: EnvironmentScene) -> Path:
    record = SceneRecord(
        width_m=scene.width_m,
        depth_m=scene.depth_m,
        resolution_m=scene.resolution_m,
        heights=scene.heights.tolist(),
        bs_xy=scene.bs_xy,
        bs_height_m=scene.bs_height_m,
        uav_height_m=scene.uav_height_m,
        obstacles=[(tuple(c), r) for c, r in scene.obstacles],
        rng_seed=scene.rng_seed,
        buildings=list(scene.buildings),
    )
    return write_json(path, record)


def load_scene(path: PathLike) -> EnvironmentScene:
    record = SceneRecord.model_validate_json(Path(path).read_text())
    return EnvironmentScene(
        width_m=record.width_m,
        depth_m=record.depth_m,
        resolution_m=record.resolution_m,
        heights=np.asarray(record.heights, dtype=np.float64),
        bs_xy=record.bs_xy,
        bs_height_m=record.bs_height_m,
        uav_height_m=record.uav_height_m,
        obstacles=tuple((tuple(c), r) for c, r in record.obstacles),
        rng_seed=record.rng_seed,
        buildings=tuple(tuple(b) for b in record.buildings),
    )


def save_ckm(path: PathLike, ckm: GroundTruthCkm) -> Path:
    return save_grid(path, ckm.gains_db, ckm.resolution_m, quantity="channel_gain", units="dB",
                     palette={"name": "viridis", "scale": "linear_db"})


def load_ckm(path: PathLike, frequency_hz: float) -> GroundTruthCkm:
    gains_db, sidecar = load_grid(path)
    if sidecar.units != "dB":
        raise SceneError(f"expected a dB gain grid, got units {sidecar.units!r}")
    gains = np.power(10.0, gains_db.astype(np.float64) / 10.0)
    return GroundTruthCkm.from_gains(gains, frequency_hz, sidecar.resolution_m)
