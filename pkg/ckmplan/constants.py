import os

OUTPUT_DIR_ENV = "CKMPLAN_OUTPUT_DIR"

SPEED_OF_LIGHT = 299_792_458.0

# Scene defaults (2 km square, 256 x 256 cells)
DEFAULT_EXTENT_M = 2000.0
DEFAULT_RESOLUTION_M = 7.8125
DEFAULT_BS_HEIGHT_M = 25.0
DEFAULT_UAV_HEIGHT_M = 100.0
DEFAULT_FREQUENCY_HZ = 2.4e9
DEFAULT_BUILDING_COUNT = 30
DEFAULT_HEIGHT_RANGE_M = (20.0, 80.0)

# Propagation oracle coefficients, 0 < |.| < 1
NLOS_PENALTY = 0.1
REFLECTION_COEFF = 0.5

# Link budget defaults
DEFAULT_P_MAX_W = 10.0
DEFAULT_B_MAX_HZ = 10e6
DEFAULT_N0_W_PER_HZ = 10 ** (-174 / 10) * 1e-3
DEFAULT_NUM_SLOTS = 50
DEFAULT_PERIOD_S = 100.0
DEFAULT_V_MAX = 50.0
DEFAULT_D_MIN_M = 10.0
DEFAULT_EPSILON_ALPHA = 1e-6

# Feature stack channel order (file format contract)
FEATURE_CHANNELS = (
    "bs_position_onehot",
    "building_heights_norm",
    "sampled_gain_norm_with_mask_zeros",
    "los_map",
    "knn_interp_norm",
)
DEFAULT_KNN_K = 3

GRID_SUFFIX = ".grid"
CHECKPOINT_MAGIC = b"CKMP"
CHECKPOINT_VERSION = 1
