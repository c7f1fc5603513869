import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from ckmplan.constants import DEFAULT_KNN_K
from ckmplan.errors import NumericalError, SceneError
from ckmplan.features import FeatureStack, MeasurementSet, knn_interpolate, minmax_normalize
from ckmplan.gridworld import GroundTruthCkm
from ckmplan.model.builder import CkmModel, build_model
from ckmplan.model.numerics import DTYPE, ParamStore, adam_step
from ckmplan.model.regressor import KanRegressor
from ckmplan.utils import set_seed

logger = logging.getLogger(__name__)

MODEL_KINDS = ("cmlp", "ckan", "mlp", "kan", "ka-mlp", "ka-kan", "knn")

_RASTER_CHUNK = 4096


@dataclass
class TrainConfig:
    epochs: int = field(default=200, metadata={"help": "Number of passes over the sampled cells."})
    batch_size: int = field(default=128, metadata={"help": "Mini-batch size, capped at the training-set size."})
    learning_rate: float = field(default=1e-3, metadata={"help": "Adam step size."})
    seed: int = field(default=0, metadata={"help": "Seed for initialization and batch order."})
    knn_k: int = field(default=DEFAULT_KNN_K, metadata={"help": "Neighbours for KNN features and the KNN baseline."})
    divergence_factor: float = field(default=10.0, metadata={"help": "Abort when the epoch loss exceeds this multiple of the initial loss."})
    eval_every: int = field(default=0, metadata={"help": "Evaluate NMSE every N epochs (0: final epoch only)."})
    progress: bool = field(default=True, metadata={"help": "Show a tqdm epoch bar."})


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    eval_nmse: float = float("nan")


@dataclass
class TrainResult:
    model: Optional[CkmModel]
    history: List[EpochRecord]
    initial_loss: float
    eval_nmse: float = float("nan")
    stack: Optional[FeatureStack] = None
    num_samples: int = 0


def cell_qbar(rows: np.ndarray, cols: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Unit-square coordinates of cell centers."""
    return np.stack([(np.asarray(rows) + 0.5) / shape[0], (np.asarray(cols) + 0.5) / shape[1]], axis=1)


def build_augmented_dataset(ms: MeasurementSet, knn_grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled cells keep their measured dB gain, every other cell takes the KNN value.

    Returns:
        ``(rows, cols, targets_db)`` covering the whole grid.
    """
    if knn_grid.shape != ms.shape:
        raise SceneError(f"knn grid shape {knn_grid.shape} != measurement grid {ms.shape}")
    targets = np.array(knn_grid, dtype=np.float64, copy=True)
    targets[ms.rows, ms.cols] = ms.gains_db
    rows, cols = np.indices(ms.shape)
    return rows.ravel(), cols.ravel(), targets.ravel()


def normalized_truth(truth: GroundTruthCkm, target_norm: Tuple[float, float]) -> np.ndarray:
    return minmax_normalize(truth.gains_db, *target_norm)


def evaluate_nmse(prediction: Union[CkmModel, np.ndarray], truth: GroundTruthCkm,
                  domain: Tuple[np.ndarray, np.ndarray], target_norm: Tuple[float, float]) -> float:
    """NMSE of a model or predicted grid over ``domain`` cells.

    Both prediction and truth are compared in the normalized dB target
    domain defined by ``target_norm``.
    """
    rows, cols = domain
    if len(rows) == 0:
        raise ValueError("evaluation domain is empty")
    if isinstance(prediction, CkmModel):
        pred = predict_cells(prediction, rows, cols, truth.shape)
    else:
        pred = np.asarray(prediction, dtype=np.float64)[rows, cols]
    target = normalized_truth(truth, target_norm)[rows, cols]
    denom = float(np.sum(target ** 2))
    if denom == 0.0:
        raise NumericalError("NMSE undefined: ground truth energy is zero on the evaluation domain")
    return float(np.sum((pred - target) ** 2) / denom)


def predict_cells(model: CkmModel, rows: np.ndarray, cols: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    qbar = cell_qbar(rows, cols, shape)
    out = np.empty(len(qbar))
    for start in range(0, len(qbar), _RASTER_CHUNK):
        out[start:start + _RASTER_CHUNK] = model.predict_gain(qbar[start:start + _RASTER_CHUNK])
    return out


def rasterize_ckm(model: CkmModel, shape: Tuple[int, int]) -> np.ndarray:
    """Predicted normalized dB gain at every cell center."""
    rows, cols = np.indices(shape)
    return predict_cells(model, rows.ravel(), cols.ravel(), shape).reshape(shape)


def predict_knn_grid(ms: MeasurementSet, k: int, target_norm: Tuple[float, float]) -> np.ndarray:
    """KNN baseline in the normalized dB target domain."""
    return minmax_normalize(knn_interpolate(ms, k), *target_norm)


def write_history_csv(path, history: List[EpochRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_mse", "eval_nmse"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_mse), repr(rec.eval_nmse)])
    return path


def _check_trend(history: List[EpochRecord], window: int = 20) -> None:
    if len(history) < 2 * window:
        return
    losses = np.array([h.train_mse for h in history])
    averages = np.convolve(losses, np.ones(window) / window, mode="valid")
    rises = np.flatnonzero(np.diff(averages) > 1e-12 * max(1.0, float(averages[0])))
    if rises.size:
        logger.warning(f"{window}-epoch moving average of the training loss rose at {rises.size} epochs "
                       f"(first at epoch {int(rises[0]) + window + 1})")


def train(model_kind: str, stack: FeatureStack, ms: MeasurementSet, cfg: TrainConfig,
          truth: Optional[GroundTruthCkm] = None) -> TrainResult:
    """Fit a CKM model to the sampled cells by mean squared error.

    Targets are sampled dB gains min-max normalized with the range of the
    sampled channel. The encoder (conditional kinds) and the regressor are
    trained jointly. ``ka-mlp``/``ka-kan`` train the coordinate-only heads on
    the KNN-augmented grid.

    Raises:
        NumericalError: if the loss becomes non-finite or exceeds
            ``divergence_factor`` times the initial loss.
    """
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"Unknown model kind: {model_kind}")
    set_seed(cfg.seed)
    target_norm = stack.target_norm
    eval_domain = ms.complement()

    if model_kind == "knn":
        result = TrainResult(model=None, history=[], initial_loss=float("nan"), stack=stack, num_samples=len(ms))
        if truth is not None and len(eval_domain[0]):
            grid = predict_knn_grid(ms, cfg.knn_k, target_norm)
            result.eval_nmse = evaluate_nmse(grid, truth, eval_domain, target_norm)
        return result

    if model_kind.startswith("ka-"):
        rows, cols, targets_db = build_augmented_dataset(ms, knn_interpolate(ms, cfg.knn_k))
        base_kind = model_kind[3:]
    else:
        rows, cols, targets_db = ms.rows, ms.cols, ms.gains_db
        base_kind = model_kind

    q = torch.as_tensor(cell_qbar(rows, cols, ms.shape), dtype=DTYPE)
    y = torch.as_tensor(minmax_normalize(targets_db, *target_norm), dtype=DTYPE)
    n = len(y)
    batch_size = min(cfg.batch_size, n)
    if batch_size < cfg.batch_size:
        logger.info(f"batch size capped at the training-set size {n}")

    model = build_model(base_kind, stack.extent, target_norm, d_in=stack.channels.shape[0], seed=cfg.seed)
    model.train()
    if model.conditional:
        model.stack_channels = torch.as_tensor(np.asarray(stack.channels), dtype=DTYPE)
    is_kan = isinstance(model.regressor, KanRegressor)
    if is_kan:
        # spline ranges start from the head inputs at every cell, then follow the first epoch
        model.regressor.set_tracking(True)
        if model.conditional:
            with torch.no_grad():
                model.encode()
        all_rows, all_cols = np.indices(ms.shape)
        model.observe_domain(cell_qbar(all_rows.ravel(), all_cols.ravel(), ms.shape))

    store = ParamStore.from_module(model, lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(cfg.seed)
    history: List[EpochRecord] = []
    initial_loss = None

    for epoch in tqdm(range(1, cfg.epochs + 1), desc=f"train {model_kind}", disable=not cfg.progress):
        perm = torch.randperm(n, generator=generator)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            store.zero_grad()
            if model.conditional:
                model.encode()
            loss = torch.mean((model(q[idx]) - y[idx]) ** 2)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            if initial_loss is None:
                initial_loss = loss.item()
            loss.backward()
            adam_step(store)
            total += loss.item() * len(idx)
        train_mse = total / n
        if train_mse > cfg.divergence_factor * max(initial_loss, 1e-12):
            raise NumericalError(
                f"training diverged at epoch {epoch}: loss {train_mse:.4g} > "
                f"{cfg.divergence_factor:g} x initial loss {initial_loss:.4g}")
        if epoch == 1 and is_kan:
            model.regressor.set_tracking(False)

        record = EpochRecord(epoch=epoch, train_mse=train_mse)
        last = epoch == cfg.epochs
        if truth is not None and len(eval_domain[0]) and (last or (cfg.eval_every and epoch % cfg.eval_every == 0)):
            model.eval()
            with torch.no_grad():
                model.encode()
            record.eval_nmse = evaluate_nmse(model, truth, eval_domain, target_norm)
            model.train()
        history.append(record)
        logger.info(f"epoch {epoch}: train_mse={train_mse:.6g} eval_nmse={record.eval_nmse:.6g}")

    model.eval()
    with torch.no_grad():
        model.encode()
    _check_trend(history)
    final_nmse = history[-1].eval_nmse if history else math.nan
    return TrainResult(model=model, history=history, initial_loss=initial_loss or math.nan, eval_nmse=final_nmse,
                       stack=stack, num_samples=len(ms))
