"""
Shared Pydantic schemas for configuration and results.

Every tunable parameter of the solvers, the trainer and the odometry
harness is validated here, so that the CLI, the pipelines and the tests
build the same objects and fail with the same messages.
"""

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .consts import (
    DEFAULT_COV_NEIGHBORS,
    DEFAULT_FAST_ITERATIONS,
    DEFAULT_GATE_SCALE,
    DEFAULT_KD,
    DEFAULT_KNN_TEMPERATURE,
    DEFAULT_LAMBDA0,
    DEFAULT_LAMBDA_MAX,
    DEFAULT_LAMBDA_MIN,
    DEFAULT_MAX_TRAIN_POINTS,
    DEFAULT_PARAM_SAMPLES,
    DEFAULT_PLANE_EPSILON,
    DEFAULT_UNROLL_ITERATIONS,
    DEFAULT_UPDATE_TOL,
    DEFAULT_VOXEL_SIZE,
    EPS_W,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
)

# ============================================================================
# ENUMS - Define allowed values
# ============================================================================


class Regularization(str, Enum):
    """Eigenvalue handling for PCA covariances."""

    PLANE_REGULARIZED = "plane_regularized"
    RAW = "raw"


class GateMode(str, Enum):
    """LM accept/reject policy."""

    HARD_LM = "hard_lm"
    SMOOTH_GATED = "smooth_gated"


class Backend(str, Enum):
    """Pairwise registration backends available to odometry."""

    ICP = "icp"
    GICP = "gicp"
    WGICP = "wgicp"


class InitialGuess(str, Enum):
    IDENTITY = "identity"
    CONSTANT_VELOCITY = "constant_velocity"


class SolverMode(str, Enum):
    """Fast (early exit, no tape) or differentiable (fixed unroll on a tape)."""

    FAST = "fast"
    DIFFERENTIABLE = "differentiable"


# ============================================================================
# SOLVER CONFIGURATION
# ============================================================================


class CovarianceParams(BaseModel):
    """PCA covariance estimation settings."""

    model_config = ConfigDict(frozen=True)

    k_neighbors: int = Field(
        default=DEFAULT_COV_NEIGHBORS, ge=3, description="Neighborhood size, self included"
    )
    plane_epsilon: float = Field(
        default=DEFAULT_PLANE_EPSILON,
        gt=0.0,
        lt=1.0,
        description="Smallest eigenvalue under plane regularization",
    )
    regularization: Regularization = Field(default=Regularization.PLANE_REGULARIZED)


class LmParams(BaseModel):
    """Levenberg–Marquardt damping schedule and termination."""

    model_config = ConfigDict(frozen=True)

    lambda0: float = Field(default=DEFAULT_LAMBDA0, gt=0.0)
    lambda_min: float = Field(default=DEFAULT_LAMBDA_MIN, gt=0.0)
    lambda_max: float = Field(default=DEFAULT_LAMBDA_MAX, gt=0.0)
    max_iterations: int = Field(
        default=DEFAULT_FAST_ITERATIONS, ge=1, description="Fast-mode iteration cap"
    )
    unroll_iterations: int = Field(
        default=DEFAULT_UNROLL_ITERATIONS,
        ge=1,
        description="Fixed iteration count of the differentiable unroll",
    )
    update_tol: float = Field(
        default=DEFAULT_UPDATE_TOL, gt=0.0, description="Twist-norm termination threshold"
    )
    gate: GateMode = Field(default=GateMode.HARD_LM)
    gate_scale: float = Field(
        default=DEFAULT_GATE_SCALE,
        gt=0.0,
        description="Sigmoid scale s applied to mean-normalized objective differences",
    )
    reversed_gate: bool = Field(
        default=False,
        description="Use sigmoid((lookahead - current)/s) for both the update and the damping schedule",
    )

    @model_validator(mode="after")
    def check_lambda_order(self) -> "LmParams":
        if not (self.lambda_min <= self.lambda0 <= self.lambda_max):
            raise ValueError(
                "lambda values must satisfy 0 < lambda_min <= lambda0 <= lambda_max "
                f"(got {self.lambda_min}, {self.lambda0}, {self.lambda_max})"
            )
        return self


# ============================================================================
# TRAINING / ODOMETRY CONFIGURATION
# ============================================================================


class TrainConfig(BaseModel):
    """Weight-model training hyperparameters (Adam)."""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=1e-3, gt=0.0)
    epochs: int = Field(default=10, ge=0)
    batch: int = Field(default=1, ge=1, description="Frame pairs per optimizer step")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = Field(default=0, ge=0)
    rejection_ratio: float = Field(
        default=0.0, ge=0.0, lt=1.0, description="Inference-time hard rejection ratio"
    )
    max_points: Optional[int] = Field(
        default=DEFAULT_MAX_TRAIN_POINTS,
        ge=1,
        description="Seeded subsample cap per training cloud (None keeps every point)",
    )
    k_d: int = Field(default=DEFAULT_KD, ge=1)
    knn_temperature: float = Field(default=DEFAULT_KNN_TEMPERATURE, gt=0.0)
    lm: LmParams = Field(default_factory=lambda: LmParams(gate=GateMode.SMOOTH_GATED))


class OdometryConfig(BaseModel):
    """Sequence odometry settings."""

    model_config = ConfigDict(frozen=True)

    voxel_size: float = Field(default=DEFAULT_VOXEL_SIZE, gt=0.0, description="meters")
    backend: Backend = Field(default=Backend.GICP)
    rejection_ratio: float = Field(default=0.0, ge=0.0, lt=1.0)
    model_path: Optional[str] = Field(default=None)
    initial_guess: InitialGuess = Field(default=InitialGuess.IDENTITY)
    k_d: int = Field(default=DEFAULT_KD, ge=1)
    knn_temperature: float = Field(default=DEFAULT_KNN_TEMPERATURE, gt=0.0)
    eps_w: float = Field(default=EPS_W, gt=0.0)
    covariance: CovarianceParams = Field(default_factory=CovarianceParams)
    lm: LmParams = Field(default_factory=LmParams)
    max_frames: Optional[int] = Field(default=None, ge=2)

    @model_validator(mode="after")
    def check_rejection_needs_model(self) -> "OdometryConfig":
        if self.rejection_ratio > 0.0 and not self.model_path:
            raise ValueError(
                f"rejection_ratio={self.rejection_ratio} requires a model_path "
                "(points are ranked by predicted weight)"
            )
        return self


class RegisterConfig(BaseModel):
    """Single pair registration settings."""

    model_config = ConfigDict(frozen=True)

    backend: Backend = Field(default=Backend.GICP)
    voxel_size: Optional[float] = Field(default=None, gt=0.0, description="None keeps every point")
    k_d: int = Field(default=DEFAULT_KD, ge=1)
    knn_temperature: float = Field(default=DEFAULT_KNN_TEMPERATURE, gt=0.0)
    covariance: CovarianceParams = Field(default_factory=CovarianceParams)
    lm: LmParams = Field(default_factory=LmParams)


class SweepConfig(BaseModel):
    """Rejection-ratio sweep over one or more voxel sizes."""

    model_config = ConfigDict(frozen=True)

    rejections: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    voxel_sizes: List[float] = Field(default_factory=lambda: [DEFAULT_VOXEL_SIZE])
    odometry: OdometryConfig = Field(default_factory=OdometryConfig)

    @field_validator("rejections")
    @classmethod
    def check_rejections(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one rejection ratio is required")
        for r in v:
            if not (0.0 <= r < 1.0):
                raise ValueError(f"rejection ratio {r} outside [0, 1)")
        return v

    @field_validator("voxel_sizes")
    @classmethod
    def check_voxels(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one voxel size is required")
        for size in v:
            if not size > 0.0:
                raise ValueError(f"voxel size {size} must be positive")
        return v


class GradcheckConfig(BaseModel):
    """Finite-difference check of tape gradients on a random problem."""

    model_config = ConfigDict(frozen=True)

    points: int = Field(default=50, ge=1)
    iterations: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)
    k_d: int = Field(default=DEFAULT_KD, ge=1)
    param_samples: int = Field(
        default=DEFAULT_PARAM_SAMPLES, ge=0, description="0 checks every model parameter"
    )
    tolerance: float = Field(default=GRADCHECK_TOLERANCE, gt=0.0)
    step: float = Field(default=GRADCHECK_STEP, gt=0.0)
    corrupt_adjoint: bool = Field(default=False, description="Negative control")


# ============================================================================
# RESULT SCHEMAS
# ============================================================================


class FrameTiming(BaseModel):
    """Per-frame wall time split and bookkeeping."""

    frame: int = Field(ge=1)
    preprocess_ms: float = Field(ge=0.0)
    inference_ms: float = Field(ge=0.0)
    alignment_ms: float = Field(ge=0.0)
    iterations: int = Field(default=0, ge=0, description="Solver iterations; 0 for flagged frames")
    source_points: int = Field(ge=0)
    target_points: int = Field(ge=0)
    surviving_pct: float = Field(ge=0.0, le=100.0)
    flagged: bool = False
    error_type: Optional[str] = None


class SegmentError(BaseModel):
    length: float = Field(gt=0.0, description="meters")
    t_err: float = Field(ge=0.0, description="percent")
    r_err: float = Field(ge=0.0, description="degrees per 100 m")
    windows: int = Field(ge=0)


class KittiErrors(BaseModel):
    """KITTI relative errors averaged over all windows of 100–800 m."""

    t_rel: float = Field(ge=0.0, description="percent")
    r_rel: float = Field(ge=0.0, description="degrees per 100 m")
    windows: int = Field(ge=1)
    per_length: List[SegmentError] = Field(default_factory=list)


class TrajectoryErrors(BaseModel):
    ate_rmse: float = Field(ge=0.0, description="meters")
    rpe_trans: float = Field(ge=0.0, description="meters per frame")
    rpe_rot: float = Field(ge=0.0, description="degrees per frame")


class SweepRow(BaseModel):
    """One Table-II style row."""

    voxel_size: float
    rejection: float
    surviving_pct: float
    t_rel: float
    r_rel: float
    alignment_ms: float
    ms_per_iteration: float


class CheckpointHeader(BaseModel):
    """Versioned checkpoint header, stored as JSON ahead of the parameters."""

    format_version: int = Field(ge=1)
    layer_shapes: List[List[int]]
    seed: int = Field(ge=0)
    n_params: int = Field(ge=0)


class GradcheckReport(BaseModel):
    max_rel_error: float
    median_rel_error: float
    n_weights: int = Field(ge=0)
    n_params_checked: int = Field(ge=0)
    loss: float
    passed: bool


class TrainSummary(BaseModel):
    epochs: int = Field(ge=0)
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    loss_history: List[float] = Field(default_factory=list)
