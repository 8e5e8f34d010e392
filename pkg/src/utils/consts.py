from enum import Enum, IntEnum


class ExitCode(IntEnum):
    """Process exit codes shared by every subcommand."""

    OK = 0
    IO_ERROR = 1  # I/O, parse and configuration errors
    DIVERGED = 2  # numerical divergence or singular systems
    CHECK_FAILED = 3  # gradient check or other self-check failed


class ReportKeys(str, Enum):
    """Metric names written to odometry reports, in output order."""

    FRAMES = "frames"
    FLAGGED_FRAMES = "flagged_frames"
    MEAN_POINTS = "mean_points"
    SURVIVING_PCT = "surviving_pct"
    T_REL = "t_rel"
    R_REL = "r_rel"
    ATE_RMSE = "ate_rmse"
    RPE_TRANS = "rpe_trans"
    RPE_ROT = "rpe_rot"


class TimingKeys(str, Enum):
    PREPROCESS = "preprocess_ms"
    INFERENCE = "inference_ms"
    ALIGNMENT = "alignment_ms"
    TOTAL = "total_ms"


# -----------------------------------------------------------------------------
# Geometry tolerances
# -----------------------------------------------------------------------------

ROTATION_TOL = 1e-9  # max |RᵀR − I| entry accepted as a rotation
ANGLE_CUT_MARGIN = 1e-6  # log_map refuses angles ≥ π − margin
POSE_REPROJECT_TOL = 1e-3  # KITTI pose rotation blocks farther than this are rejected
PSD_TOL = 1e-9

# -----------------------------------------------------------------------------
# Correspondence / covariance defaults
# -----------------------------------------------------------------------------

DEFAULT_KD = 4
DEFAULT_KNN_TEMPERATURE = 1.0  # meters
EPS_W = 1e-3  # floor on target weights when scaling distances
DEFAULT_LEAF_SIZE = 16
DEFAULT_COV_NEIGHBORS = 20
DEFAULT_PLANE_EPSILON = 1e-3

# -----------------------------------------------------------------------------
# Solver limits
# -----------------------------------------------------------------------------

CONDITION_LIMIT = 1e12  # inverse3 / normal equations
DIVERGENCE_LIMIT = 1e12  # objective value treated as divergence
DEFAULT_LAMBDA0 = 1e-4
DEFAULT_LAMBDA_MIN = 1e-7
DEFAULT_LAMBDA_MAX = 1e2
DEFAULT_FAST_ITERATIONS = 64
DEFAULT_UNROLL_ITERATIONS = 20
DEFAULT_UPDATE_TOL = 1e-5
DEFAULT_GATE_SCALE = 1.0

# -----------------------------------------------------------------------------
# Weight model / training
# -----------------------------------------------------------------------------

SIGMA_FLOOR = 1e-6  # soft rejection std floor
POSE_LOSS_FLOOR = 1e-24  # squared Frobenius floor keeping sqrt differentiable at 0
ENCODER_WIDTHS = (3, 32, 64)
HEAD_WIDTHS = (128, 64, 1)
CHECKPOINT_MAGIC = b"WGICPWM\x00"
CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_MAX_TRAIN_POINTS = 1024

# -----------------------------------------------------------------------------
# Odometry / evaluation
# -----------------------------------------------------------------------------

DEFAULT_VOXEL_SIZE = 0.5
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
VELODYNE_RECORD_BYTES = 16
FRAME_CACHE_ENTRIES = 2  # preprocessed frames kept outside a sweep

# -----------------------------------------------------------------------------
# Gradient check
# -----------------------------------------------------------------------------

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_STEP = 1e-5
GRADCHECK_REL_FLOOR = 1e-4  # denominators below this are treated as absolute error
DEFAULT_PARAM_SAMPLES = 0  # every model parameter

# Artifact subdirectory under the system temp dir when no --plot-dir is given
PLOTS_SUBDIR = "wgicp_plots"
