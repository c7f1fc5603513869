"""
Command-line entry points: ``gen``, ``train``, ``plan`` and ``sweep``.

Every command writes its artifacts into ``--output_dir`` (default
``$CKMPLAN_OUTPUT_DIR`` or the working directory) next to a
``manifest_<command>.json`` run manifest. Passing that manifest back with
``--config`` replays the command.

Exit codes: 0 ok, 1 other errors, 2 infeasible plan, 3 numerical failure.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import shortuuid
import transformers
from pydantic import BaseModel

from ckmplan import __version__
from ckmplan.constants import (
    DEFAULT_BS_HEIGHT_M,
    DEFAULT_BUILDING_COUNT,
    DEFAULT_EXTENT_M,
    DEFAULT_FREQUENCY_HZ,
    DEFAULT_HEIGHT_RANGE_M,
    DEFAULT_RESOLUTION_M,
    DEFAULT_UAV_HEIGHT_M,
    OUTPUT_DIR_ENV,
)
from ckmplan.errors import CkmPlanError, InfeasibleError, NumericalError, SceneError
from ckmplan.features import build_feature_stack, knn_interpolate, sample_measurements, save_feature_stack
from ckmplan.grid_io import load_grid, save_grid, write_json
from ckmplan.gridworld import (
    EnvironmentScene,
    GroundTruthCkm,
    compute_ground_truth_ckm,
    compute_los_map,
    generate_scene,
    load_ckm,
    load_scene,
    save_ckm,
    save_scene,
)
from ckmplan.model.builder import CkmModel, load_model
from ckmplan.model.regressor import count_parameters
from ckmplan.optim.jpbto import AoConfig, AoResult, CkmChannel, StatisticalChannel, default_endpoints, run_ao
from ckmplan.optim.ratemodel import (
    LinkBudget,
    average_rate,
    calibrate_beta0,
    check_feasibility,
    save_plan,
    truth_rates,
)
from ckmplan.plotting import save_heatmap_svg, save_trajectory_svg
from ckmplan.train.train import MODEL_KINDS, TrainConfig, TrainResult, rasterize_ckm, train, write_history_csv
from ckmplan.utils import build_logger, sha256_file

logger = logging.getLogger("cli")

PLANNERS = ("ckm", "sc")
SWEEP_PARAMS = ("pmax", "bmax", "N", "ratio")
_SWEEP_DEFAULTS = {
    "pmax": [1.0, 5.0, 10.0],
    "bmax": [1e6, 5e6, 10e6],
    "N": [10, 30, 50],
    "ratio": [0.005, 0.01, 0.03],
}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERIC = 3


def _default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, ".")


@dataclass
class RunArguments:
    output_dir: str = field(default_factory=_default_output_dir,
                            metadata={"help": f"Directory for all artifacts (default ${OUTPUT_DIR_ENV} or '.')."})
    scene_dir: Optional[str] = field(default=None,
                                     metadata={"help": "Directory holding the `gen` outputs (default: output_dir)."})

    @property
    def scene_path(self) -> Path:
        return Path(self.scene_dir or self.output_dir)


@dataclass
class SceneArguments:
    seed: int = field(default=0, metadata={"help": "Scene generation seed."})
    extent_m: float = field(default=DEFAULT_EXTENT_M, metadata={"help": "Side of the square area (m)."})
    resolution_m: float = field(default=DEFAULT_RESOLUTION_M, metadata={"help": "Cell size (m)."})
    buildings: int = field(default=DEFAULT_BUILDING_COUNT, metadata={"help": "Number of buildings to place."})
    height_min_m: float = field(default=DEFAULT_HEIGHT_RANGE_M[0], metadata={"help": "Lowest building height (m)."})
    height_max_m: float = field(default=DEFAULT_HEIGHT_RANGE_M[1], metadata={"help": "Tallest building height (m)."})
    bs_height_m: float = field(default=DEFAULT_BS_HEIGHT_M, metadata={"help": "Base station antenna height (m)."})
    uav_height_m: float = field(default=DEFAULT_UAV_HEIGHT_M, metadata={"help": "UAV flight altitude (m)."})
    frequency_hz: float = field(default=DEFAULT_FREQUENCY_HZ, metadata={"help": "Carrier frequency (Hz)."})
    reflections: int = field(default=0, metadata={"help": "Add single wall reflections to the truth map (0 or 1).",
                                                  "choices": [0, 1]})


@dataclass
class FeatureArguments:
    ratio: float = field(default=0.03, metadata={"help": "Fraction of cells with a gain measurement."})
    noise_db: float = field(default=0.0, metadata={"help": "Log-normal measurement noise (dB std), 0 disables it."})


@dataclass
class ModelArguments:
    kind: str = field(default="ckan", metadata={"help": "Model kind to train.", "choices": list(MODEL_KINDS)})


@dataclass
class PlanArguments:
    planner: str = field(default="ckm", metadata={"help": "Channel used while planning.", "choices": list(PLANNERS)})
    checkpoint: Optional[str] = field(default=None,
                                      metadata={"help": "CKM checkpoint (default <scene_dir>/model_ckan.ckmp)."})
    num_uavs: int = field(default=2, metadata={"help": "Number of UAVs M.", "aliases": ["--M"]})
    endpoint_seed: int = field(default=0, metadata={"help": "Seed for endpoint placement (0: closest to the corners)."})


@dataclass
class SweepArguments:
    param: str = field(default="bmax", metadata={"help": "Swept quantity.", "choices": list(SWEEP_PARAMS)})
    values: List[float] = field(default_factory=list,
                                metadata={"help": "Grid points of the swept quantity (default depends on --param)."})
    repeats: int = field(default=3, metadata={"help": "Runs per grid point, each with its own endpoint seed."})
    planners: List[str] = field(default_factory=lambda: list(PLANNERS), metadata={"help": "Planners to compare."})
    workers: int = field(default=4, metadata={"help": "Concurrent planner runs."})


class ArtifactEntry(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    run_id: str
    command: str
    version: str
    created_at: str
    config: Dict[str, Any]
    seeds: Dict[str, int]
    inputs: List[ArtifactEntry] = []
    outputs: List[ArtifactEntry] = []
    timings_s: Dict[str, float] = {}


def manifest_path(output_dir, command: str) -> Path:
    return Path(output_dir) / f"manifest_{command}.json"


class RunRecorder:
    """Collects artifacts and stage timings of one command and writes its manifest."""

    def __init__(self, command: str, args: Sequence[Any], output_dir) -> None:
        self.command = command
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config: Dict[str, Any] = {}
        self.seeds: Dict[str, int] = {}
        for a in args:
            for k, v in dataclasses.asdict(a).items():
                self.config[k] = v
                if k.endswith("seed"):
                    self.seeds[f"{type(a).__name__}.{k}"] = int(v)
        self.inputs: List[Path] = []
        self.outputs: List[Path] = []
        self.timings: Dict[str, float] = {}
        self.run_id = shortuuid.uuid()

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - t0

    def add_input(self, path) -> Path:
        self.inputs.append(Path(path))
        return Path(path)

    def add_output(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def add_grid_output(self, path) -> Path:
        path = Path(path)
        self.add_output(path)
        self.add_output(path.with_suffix(".json"))
        return path

    def finish(self) -> Path:
        def entries(paths):
            return [ArtifactEntry(path=str(p), sha256=sha256_file(p)) for p in dict.fromkeys(paths) if p.exists()]

        manifest = RunManifest(
            run_id=self.run_id,
            command=self.command,
            version=__version__,
            created_at=datetime.now(timezone.utc).isoformat(),
            config=self.config,
            seeds=self.seeds,
            inputs=entries(self.inputs),
            outputs=entries(self.outputs),
            timings_s=self.timings,
        )
        path = write_json(manifest_path(self.output_dir, self.command), manifest)
        logger.info(f"{self.command} run {self.run_id}: manifest written to {path}")
        return path


def parse_command_args(argv: Sequence[str], dataclass_types: Sequence[type]) -> Tuple[Any, ...]:
    """Parse ``argv`` into ``dataclass_types``, or load them from ``--config``.

    ``--config`` accepts either a flat JSON object of field values or a run
    manifest, whose config snapshot is used.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=str, default=None)
    known, rest = pre.parse_known_args(list(argv))
    parser = transformers.HfArgumentParser(dataclass_types)
    if known.config is None:
        return tuple(parser.parse_args_into_dataclasses(args=rest, look_for_args_file=False))
    payload = json.loads(Path(known.config).read_text())
    if "run_id" in payload and "config" in payload:
        logger.info(f"replaying run {payload['run_id']} from {known.config}")
        return tuple(parser.parse_dict(RunManifest.model_validate(payload).config, allow_extra_keys=True))
    return tuple(parser.parse_json_file(known.config, allow_extra_keys=True))


# Scene files written by `gen`
SCENE_FILE = "scene.json"
TRUTH_FILE = "truth_gain.grid"
LOS_FILE = "los_map.grid"


def load_scene_dir(scene_dir: Path, recorder: Optional[RunRecorder] = None) -> Tuple[EnvironmentScene, GroundTruthCkm, np.ndarray]:
    """Scene, ground-truth map and LoS map written by ``gen``."""
    scene_file = scene_dir / SCENE_FILE
    if not scene_file.exists():
        raise SceneError(f"no scene in {scene_dir}, run `ckmplan gen` first")
    frequency_hz = DEFAULT_FREQUENCY_HZ
    gen_manifest = manifest_path(scene_dir, "gen")
    if gen_manifest.exists():
        frequency_hz = float(RunManifest.model_validate_json(gen_manifest.read_text()).config["frequency_hz"])
    scene = load_scene(scene_file)
    truth = load_ckm(scene_dir / TRUTH_FILE, frequency_hz)
    los, _ = load_grid(scene_dir / LOS_FILE)
    if recorder is not None:
        for name in (SCENE_FILE, TRUTH_FILE, LOS_FILE):
            recorder.add_input(scene_dir / name)
    return scene, truth, los.astype(np.uint8)


def cmd_gen(argv: Sequence[str]) -> Path:
    run_args, scene_args = parse_command_args(argv, (RunArguments, SceneArguments))
    recorder = RunRecorder("gen", (run_args, scene_args), run_args.output_dir)
    out = recorder.output_dir

    with recorder.stage("scene"):
        scene = generate_scene(scene_args.seed, scene_args.extent_m, scene_args.resolution_m, scene_args.buildings,
                               (scene_args.height_min_m, scene_args.height_max_m),
                               bs_height_m=scene_args.bs_height_m, uav_height_m=scene_args.uav_height_m)
    with recorder.stage("truth"):
        truth = compute_ground_truth_ckm(scene, scene_args.frequency_hz, n_reflections=scene_args.reflections)
        los = compute_los_map(scene)

    recorder.add_output(save_scene(out / SCENE_FILE, scene))
    recorder.add_grid_output(save_ckm(out / TRUTH_FILE, truth))
    recorder.add_grid_output(save_grid(out / LOS_FILE, los, scene.resolution_m, quantity="los", units="binary"))
    with recorder.stage("plot"):
        recorder.add_output(save_heatmap_svg(out / "truth_gain.svg", truth.gains_db, scene, title="ground-truth CKM"))
    logger.info(f"scene {scene.shape[0]}x{scene.shape[1]} with {len(scene.buildings)} buildings, "
                f"{int(los.sum())} LoS cells, gains in [{truth.gains_db.min():.1f}, {truth.gains_db.max():.1f}] dB")
    return recorder.finish()


def train_on_scene(scene: EnvironmentScene, truth: GroundTruthCkm, los: np.ndarray, kind: str,
                   feature_args: FeatureArguments, cfg: TrainConfig) -> TrainResult:
    ms = sample_measurements(truth, feature_args.ratio, cfg.seed, noise_db=feature_args.noise_db)
    logger.info(f"{len(ms)} train samples on {ms.shape[0]}x{ms.shape[1]} (ratio {feature_args.ratio})")
    stack = build_feature_stack(scene, ms, los, knn_interpolate(ms, cfg.knn_k))
    return train(kind, stack, ms, cfg, truth=truth)


def cmd_train(argv: Sequence[str]) -> Path:
    run_args, feature_args, model_args, cfg = parse_command_args(
        argv, (RunArguments, FeatureArguments, ModelArguments, TrainConfig))
    recorder = RunRecorder("train", (run_args, feature_args, model_args, cfg), run_args.output_dir)
    out = recorder.output_dir
    kind = model_args.kind
    scene, truth, los = load_scene_dir(run_args.scene_path, recorder)

    with recorder.stage("train"):
        result = train_on_scene(scene, truth, los, kind, feature_args, cfg)
    metrics = {"kind": kind, "num_samples": result.num_samples, "eval_nmse": result.eval_nmse,
               "initial_loss": result.initial_loss}
    logger.info(f"{kind}: eval NMSE {result.eval_nmse:.6g}")

    if result.model is not None:
        model = result.model
        metrics["head_parameters"] = count_parameters(model.regressor)
        recorder.add_grid_output(save_feature_stack(out / "features.grid", result.stack))
        recorder.add_output(model.save(out / f"model_{kind}.ckmp"))
        recorder.add_output(write_history_csv(out / f"history_{kind}.csv", result.history))
        with recorder.stage("plot"):
            predicted_db = model.denormalize_db(rasterize_ckm(model, truth.shape))
            recorder.add_output(save_heatmap_svg(out / f"ckm_{kind}.svg", predicted_db, scene,
                                                 title=f"{kind} prediction"))
    recorder.add_output(write_json(out / f"metrics_{kind}.json", metrics))
    return recorder.finish()


def build_channel(planner: str, scene: EnvironmentScene, truth: GroundTruthCkm, model: Optional[CkmModel] = None):
    if planner == "sc":
        beta0 = calibrate_beta0(scene, truth)
        logger.info(f"statistical channel calibrated to beta0={beta0:.6g}")
        return StatisticalChannel(scene, beta0)
    if model is None:
        raise ValueError("the ckm planner needs a trained model")
    return CkmChannel(model)


def plan_once(channel, scene: EnvironmentScene, truth: GroundTruthCkm, budget: LinkBudget, cfg: AoConfig,
              num_uavs: int, endpoint_seed: int) -> Tuple[AoResult, np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """One AO run checked against the constraint checker and scored on the truth map.

    Raises:
        InfeasibleError: if the returned plan breaks any constraint.
    """
    endpoints = default_endpoints(scene, budget, num_uavs, seed=endpoint_seed)
    result = run_ao(channel, scene, budget, cfg, endpoints, truth=truth)
    violations = check_feasibility(result.plan, scene, budget, endpoints)
    if violations:
        raise InfeasibleError("planner returned an infeasible plan", violations)
    return result, truth_rates(result.plan, truth, scene, budget), endpoints


def _write_ao_history(path, result: AoResult) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["outer_iter", "internal_objective", "truth_min_rate"])
        for rec in result.history:
            writer.writerow([rec.outer_iter, repr(rec.internal_objective), repr(rec.truth_min_rate)])
    return path


def _append_row(path, header: Sequence[str], row: Sequence[Any]) -> Path:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(header)
        writer.writerow(row)
    return path


def _checkpoint_path(plan_args: PlanArguments, run_args: RunArguments) -> Path:
    return Path(plan_args.checkpoint) if plan_args.checkpoint else run_args.scene_path / "model_ckan.ckmp"


def cmd_plan(argv: Sequence[str]) -> Path:
    run_args, plan_args, budget, cfg = parse_command_args(argv, (RunArguments, PlanArguments, LinkBudget, AoConfig))
    recorder = RunRecorder("plan", (run_args, plan_args, budget, cfg), run_args.output_dir)
    out = recorder.output_dir
    planner = plan_args.planner
    scene, truth, _ = load_scene_dir(run_args.scene_path, recorder)

    model = None
    if planner == "ckm":
        model = load_model(recorder.add_input(_checkpoint_path(plan_args, run_args)))
    channel = build_channel(planner, scene, truth, model)

    with recorder.stage("plan"):
        result, truth_table, endpoints = plan_once(channel, scene, truth, budget, cfg,
                                                   plan_args.num_uavs, plan_args.endpoint_seed)
    plan = result.plan
    truth_min = float(np.min(average_rate(truth_table)))
    predicted_min = plan.min_average_rate()
    logger.info(f"{planner} planner: predicted min rate {predicted_min:.6g} bit/s, truth min rate {truth_min:.6g} bit/s "
                f"after {len(result.history)} outer iterations")

    recorder.add_output(save_plan(out / f"plan_{planner}.json", plan, planner, budget, truth_table))
    recorder.add_output(_write_ao_history(out / f"ao_history_{planner}.csv", result))
    recorder.add_output(_append_row(
        out / "plan_comparison.csv",
        ["planner", "num_uavs", "num_slots", "p_max", "b_max", "predicted_min_rate", "truth_min_rate", "outer_iterations"],
        [planner, plan.num_uavs, plan.num_slots, budget.p_max, budget.b_max, repr(predicted_min), repr(truth_min),
         len(result.history)]))
    with recorder.stage("plot"):
        recorder.add_output(save_trajectory_svg(
            out / f"trajectories_{planner}.svg", truth.gains_db, scene, list(plan.Q), d_min=budget.d_min,
            title=f"{planner} planner, truth min rate {truth_min / 1e6:.3f} Mbit/s"))
    return recorder.finish()


def _swept_budget(budget: LinkBudget, param: str, value: float) -> LinkBudget:
    if param == "pmax":
        return dataclasses.replace(budget, p_max=float(value))
    if param == "bmax":
        return dataclasses.replace(budget, b_max=float(value))
    if param == "N":
        return dataclasses.replace(budget, num_slots=int(round(value)))
    return dataclasses.replace(budget)


def cmd_sweep(argv: Sequence[str]) -> Path:
    run_args, sweep_args, plan_args, feature_args, model_args, cfg, budget, ao_cfg = parse_command_args(
        argv, (RunArguments, SweepArguments, PlanArguments, FeatureArguments, ModelArguments, TrainConfig,
               LinkBudget, AoConfig))
    recorder = RunRecorder("sweep", (run_args, sweep_args, plan_args, feature_args, model_args, cfg, budget, ao_cfg),
                           run_args.output_dir)
    out = recorder.output_dir
    param = sweep_args.param
    values = list(sweep_args.values) or _SWEEP_DEFAULTS[param]
    unknown = [p for p in sweep_args.planners if p not in PLANNERS]
    if unknown:
        raise ValueError(f"unknown planners {unknown}, expected a subset of {PLANNERS}")
    if sweep_args.repeats < 1 or sweep_args.workers < 1:
        raise ValueError("repeats and workers must be >= 1")
    scene, truth, los = load_scene_dir(run_args.scene_path, recorder)

    # one channel per (grid point, planner); ratio sweeps retrain the CKM per grid point
    channels: Dict[Tuple[float, str], Any] = {}
    shared_model = None
    with recorder.stage("channels"):
        for value in values:
            for planner in sweep_args.planners:
                if planner == "sc":
                    channels[(value, planner)] = build_channel("sc", scene, truth)
                elif param == "ratio":
                    point = dataclasses.replace(feature_args, ratio=float(value))
                    trained = train_on_scene(scene, truth, los, model_args.kind, point, cfg)
                    channels[(value, planner)] = build_channel("ckm", scene, truth, trained.model)
                else:
                    if shared_model is None:
                        shared_model = load_model(recorder.add_input(_checkpoint_path(plan_args, run_args)))
                    channels[(value, planner)] = build_channel("ckm", scene, truth, shared_model)

    def run(value: float, planner: str, repeat: int) -> Dict[str, Any]:
        row = {"param": param, "value": value, "planner": planner, "repeat": repeat,
               "endpoint_seed": plan_args.endpoint_seed + repeat, "truth_min_rate": float("nan"), "status": "ok"}
        try:
            _, table, _ = plan_once(channels[(value, planner)], scene, truth, _swept_budget(budget, param, value),
                                    dataclasses.replace(ao_cfg), plan_args.num_uavs, row["endpoint_seed"])
            row["truth_min_rate"] = float(np.min(average_rate(table)))
        except (CkmPlanError, ValueError) as e:
            row["status"] = f"{type(e).__name__}: {e}"
            logger.warning(f"sweep run {param}={value} planner={planner} repeat={repeat} failed: {e}")
        return row

    jobs = [(v, p, r) for v in values for p in sweep_args.planners for r in range(sweep_args.repeats)]
    with recorder.stage("runs"), ThreadPoolExecutor(max_workers=sweep_args.workers) as pool:
        rows = list(pool.map(lambda job: run(*job), jobs))

    runs_path = out / f"sweep_{param}_runs.csv"
    with open(runs_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    recorder.add_output(runs_path)

    summary_path = out / f"sweep_{param}.csv"
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["param", "value", "planner", "mean_min_rate", "std_min_rate", "runs_ok", "runs_failed"])
        for value in values:
            for planner in sweep_args.planners:
                rates = np.array([r["truth_min_rate"] for r in rows
                                  if r["value"] == value and r["planner"] == planner and r["status"] == "ok"])
                failed = sum(1 for r in rows if r["value"] == value and r["planner"] == planner and r["status"] != "ok")
                mean = float(rates.mean()) if rates.size else float("nan")
                std = float(rates.std()) if rates.size else float("nan")
                writer.writerow([param, value, planner, repr(mean), repr(std), int(rates.size), failed])
    recorder.add_output(summary_path)
    return recorder.finish()


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "plan": cmd_plan,
    "sweep": cmd_sweep,
}


def _usage() -> str:
    return ("usage: ckmplan {gen,train,plan,sweep} [--config manifest.json] [options]\n"
            "run `ckmplan <command> --help` for the options of a command")


def main(argv: Optional[Sequence[str]] = None) -> int:
    global logger
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(_usage())
        return EXIT_OK if argv else EXIT_ERROR
    command = argv[0]
    if command not in COMMANDS:
        print(f"unknown command {command!r}\n{_usage()}", file=sys.stderr)
        return EXIT_ERROR

    logger = build_logger("cli", "ckmplan.log")
    try:
        COMMANDS[command](argv[1:])
    except InfeasibleError as e:
        logger.error(f"{command}: {e}")
        for v in e.violations:
            logger.error(f"  {v}")
        return EXIT_INFEASIBLE
    except NumericalError as e:
        logger.error(f"{command}: numerical failure: {e}")
        return EXIT_NUMERIC
    except (CkmPlanError, ValueError, OSError) as e:
        logger.error(f"{command}: {e}")
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
