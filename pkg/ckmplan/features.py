"""
Conditional input features: measurement sampling, KNN interpolation,
per-channel normalization and the stacked encoder input.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.neighbors import NearestNeighbors

from ckmplan.constants import DEFAULT_KNN_K, FEATURE_CHANNELS
from ckmplan.errors import SceneError
from ckmplan.grid_io import PathLike, load_grid, save_grid
from ckmplan.gridworld import EnvironmentScene, GroundTruthCkm

logger = logging.getLogger(__name__)

NormParams = Tuple[float, float]
Extent = Tuple[Tuple[float, float], Tuple[float, float]]


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Sampled cells and their measured linear gains.

    Samples are kept sorted by (row, col).
    """
    rows: np.ndarray
    cols: np.ndarray
    gains: np.ndarray
    ratio: float
    seed: int
    shape: Tuple[int, int]

    def __len__(self) -> int:
        return len(self.gains)

    @property
    def entries(self) -> List[Tuple[Tuple[int, int], float]]:
        return [((int(r), int(c)), float(g)) for r, c, g in zip(self.rows, self.cols, self.gains)]

    @property
    def gains_db(self) -> np.ndarray:
        return 10.0 * np.log10(self.gains)

    @property
    def flat_index(self) -> np.ndarray:
        return self.rows * self.shape[1] + self.cols

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def complement(self) -> Tuple[np.ndarray, np.ndarray]:
        """(rows, cols) of every unsampled cell, the evaluation split."""
        return np.nonzero(~self.mask())


def sample_measurements(ckm: GroundTruthCkm, ratio: float, seed: int, noise_db: float = 0.0) -> MeasurementSet:
    """Uniformly sample ``round(ratio * cells)`` cells without replacement.

    Args:
        noise_db: standard deviation of log-normal measurement noise applied
            to the sampled gains only (0 disables it).
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"sampling ratio must be in (0, 1], got {ratio}")
    if noise_db < 0:
        raise ValueError(f"noise_db must be >= 0, got {noise_db}")
    rows, cols = ckm.shape
    total = rows * cols
    count = int(np.rint(ratio * total))
    if count == 0:
        raise SceneError(f"ratio {ratio} yields no samples on a {rows}x{cols} grid")

    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=count, replace=False))
    r, c = np.divmod(flat, cols)
    gains = ckm.gains[r, c].copy()
    if noise_db > 0:
        gains = gains * np.power(10.0, rng.normal(0.0, noise_db, size=count) / 10.0)
    return MeasurementSet(rows=r, cols=c, gains=gains, ratio=ratio, seed=seed, shape=(rows, cols))


def knn_interpolate(ms: MeasurementSet, k: int = DEFAULT_KNN_K,
                    shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Mean dB gain of the ``k`` nearest samples for every cell.

    Distances are Euclidean in cell units; equal distances are resolved by
    the (row, col) order of the samples.
    """
    shape = ms.shape if shape is None else tuple(shape)
    n = len(ms)
    if k < 1 or n < k:
        raise ValueError(f"need 1 <= k <= {n} samples, got k={k}")

    samples = np.stack([ms.rows, ms.cols], axis=1).astype(np.int64)
    values = ms.gains_db
    gr, gc = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    queries = np.stack([gr.ravel(), gc.ravel()], axis=1).astype(np.int64)

    n_candidates = min(n, k + 8)
    nbrs = NearestNeighbors(n_neighbors=n_candidates, algorithm="kd_tree").fit(samples)
    _, cand = nbrs.kneighbors(queries)

    d2 = ((samples[cand] - queries[:, None, :]) ** 2).sum(axis=-1)
    # lexsort keys: last key is primary
    order = np.lexsort((cand, d2), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    chosen = cand[:, :k]
    out = values[chosen].mean(axis=1)

    if n_candidates < n:
        ambiguous = np.flatnonzero(d2[:, k - 1] == d2[:, -1])
        for q in ambiguous:
            radius = np.sqrt(d2[q, k - 1]) + 1e-6
            idx = nbrs.radius_neighbors(queries[q:q + 1], radius=radius, return_distance=False)[0]
            idx_d2 = ((samples[idx] - queries[q]) ** 2).sum(axis=-1)
            pick = idx[np.lexsort((idx, idx_d2))][:k]
            out[q] = values[pick].mean()
        if len(ambiguous):
            logger.debug(f"knn: resolved {len(ambiguous)} boundary ties with radius queries")
    return out.reshape(shape)


def minmax_normalize(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map ``[lo, hi]`` to ``[0, 1]``; a degenerate range maps to 0."""
    values = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def minmax_denormalize(values, lo: float, hi: float):
    return lo + np.asarray(values, dtype=np.float64) * (hi - lo)


@dataclass(frozen=True, eq=False)
class FeatureStack:
    channels: np.ndarray
    norm_params: Tuple[NormParams, ...]
    resolution_m: float
    extent_m: Tuple[float, float]
    channel_names: Tuple[str, ...] = FEATURE_CHANNELS

    @property
    def shape(self) -> Tuple[int, int]:
        return self.channels.shape[1:]

    @property
    def target_norm(self) -> NormParams:
        """dB range of the sampled gains, shared by the training targets."""
        return self.norm_params[FEATURE_CHANNELS.index("sampled_gain_norm_with_mask_zeros")]

    @property
    def extent(self) -> Extent:
        return (0.0, self.extent_m[0]), (0.0, self.extent_m[1])


def build_feature_stack(scene: EnvironmentScene, ms: MeasurementSet, los: np.ndarray,
                        knn: np.ndarray) -> FeatureStack:
    """Stack the five normalized input channels in their fixed order."""
    shape = scene.shape
    if ms.shape != shape or los.shape != shape or knn.shape != shape:
        raise SceneError(
            f"shape mismatch: scene {shape}, samples {ms.shape}, los {los.shape}, knn {knn.shape}")

    bs = np.zeros(shape)
    bs[scene.cell_of(scene.bs_xy)] = 1.0

    h_lo, h_hi = float(scene.heights.min()), float(scene.heights.max())
    heights = minmax_normalize(scene.heights, h_lo, h_hi)

    sampled_db = ms.gains_db
    s_lo, s_hi = float(sampled_db.min()), float(sampled_db.max())
    sampled = np.zeros(shape)
    sampled[ms.rows, ms.cols] = minmax_normalize(sampled_db, s_lo, s_hi)

    los_channel = np.asarray(los, dtype=np.float64)

    k_lo, k_hi = float(knn.min()), float(knn.max())
    knn_channel = minmax_normalize(knn, k_lo, k_hi)

    channels = np.stack([bs, heights, sampled, los_channel, knn_channel]).astype(np.float32)
    return FeatureStack(
        channels=channels,
        norm_params=((0.0, 1.0), (h_lo, h_hi), (s_lo, s_hi), (0.0, 1.0), (k_lo, k_hi)),
        resolution_m=scene.resolution_m,
        extent_m=(scene.width_m, scene.depth_m),
    )


def save_feature_stack(path: PathLike, stack: FeatureStack) -> Path:
    return save_grid(path, stack.channels, stack.resolution_m, quantity="feature_stack",
                     units="normalized", channel_names=list(stack.channel_names),
                     norm_params=list(stack.norm_params))


def load_feature_stack(path: PathLike) -> FeatureStack:
    channels, sidecar = load_grid(path)
    if sidecar.channel_names is None or tuple(sidecar.channel_names) != FEATURE_CHANNELS:
        raise SceneError(f"unexpected channel order in {path}: {sidecar.channel_names}")
    return FeatureStack(
        channels=channels,
        norm_params=tuple(tuple(p) for p in sidecar.norm_params),
        resolution_m=sidecar.resolution_m,
        extent_m=(sidecar.rows * sidecar.resolution_m, sidecar.cols * sidecar.resolution_m),
    )


def normalize_location(q: Sequence[float], extent: Extent) -> np.ndarray:
    """Affine map of a position in meters onto the unit square.

    Raises:
        ValueError: if ``q`` is outside ``extent``.
    """
    q = np.asarray(q, dtype=np.float64)
    (x_lo, x_hi), (y_lo, y_hi) = extent
    tol = 1e-9 * max(x_hi - x_lo, y_hi - y_lo)
    if not (x_lo - tol <= q[..., 0]).all() or not (q[..., 0] <= x_hi + tol).all() \
            or not (y_lo - tol <= q[..., 1]).all() or not (q[..., 1] <= y_hi + tol).all():
        raise ValueError(f"location {q.tolist()} is outside the extent {extent}")
    out = np.empty_like(q)
    out[..., 0] = (q[..., 0] - x_lo) / (x_hi - x_lo)
    out[..., 1] = (q[..., 1] - y_lo) / (y_hi - y_lo)
    return np.clip(out, 0.0, 1.0)


def location_jacobian(extent: Extent) -> np.ndarray:
    """d q̄ / d q, a constant diagonal matrix."""
    (x_lo, x_hi), (y_lo, y_hi) = extent
    return np.diag([1.0 / (x_hi - x_lo), 1.0 / (y_hi - y_lo)])
