__version__ = "0.1.0"

from .errors import CacheError, CkmPlanError, InfeasibleError, NumericalError, SceneError
from .gridworld import EnvironmentScene, GroundTruthCkm, compute_ground_truth_ckm, compute_los_map, generate_scene
from .features import FeatureStack, MeasurementSet, build_feature_stack, knn_interpolate, sample_measurements
from .model import CkmModel, build_model, load_model
from .optim import AoConfig, LinkBudget, PlanState, run_ao
