"""Sequence odometry and trajectory metrics.

Frame t is registered onto frame t−1; the resulting T̃_t maps frame t
into L_{t−1} and the trajectory is the running product in L₁:

    T_1 = I,   T_t = T_{t−1} · T̃_t

Per-frame work is split into three timed phases: preprocess (voxel
downsample + covariances), inference (weight prediction, only with a
model) and alignment (rejection + solver).
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from ..utils.cloud_cache import get_cached
from ..utils.consts import KITTI_LENGTHS
from ..utils.errors import EmptyCloud, NumericalError, SequenceTooShort, TooFewPoints
from ..utils.schemas import (
    Backend,
    CovarianceParams,
    FrameTiming,
    InitialGuess,
    KittiErrors,
    OdometryConfig,
    SegmentError,
    TrajectoryErrors,
)
from .covariance_tools import estimate_covariances
from .geometry_tools import PointCloud, RigidTransform, rotation_angle, voxel_downsample
from .kitti_io_tools import VelodyneScan
from .registration_tools import RegistrationResult, WgicpProblem, align_gicp, align_icp, align_wgicp
from .weight_tools import WeightModel, predict_weights, soft_reject, survivor_indices

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Frame:
    cloud: PointCloud  # downsampled, covariances attached
    raw_points: int
    preprocess_ms: float


@dataclass
class OdometryRun:
    relative_poses: List[RigidTransform] = field(default_factory=list)  # T̃_t, t ≥ 1
    trajectory: List[RigidTransform] = field(default_factory=list)  # T_t in L₁
    timings: List[FrameTiming] = field(default_factory=list)

    @property
    def flagged_frames(self) -> List[int]:
        return [t.frame for t in self.timings if t.flagged]

    def mean_timing(self, key: str) -> float:
        if not self.timings:
            return 0.0
        return float(np.mean([getattr(t, key) for t in self.timings]))

    def ms_per_iteration(self) -> float:
        """Alignment wall time per solver iteration over the run; nan without iterations."""
        iterations = sum(t.iterations for t in self.timings)
        if iterations == 0:
            return math.nan
        return sum(t.alignment_ms for t in self.timings) / iterations


# =============================================================================
# PREPROCESSING
# =============================================================================


def preprocess(cloud: PointCloud, voxel_size: float, covariance: Optional[CovarianceParams] = None) -> PointCloud:
    """Voxel downsample then estimate covariances."""
    return estimate_covariances(voxel_downsample(cloud, voxel_size), covariance)


def preprocess_scan(scan: VelodyneScan, config: OdometryConfig) -> Frame:
    """Preprocess one scan; scans read from files are cached per (file, voxel, covariance params)."""

    def build() -> Frame:
        start = time.perf_counter()
        cloud = preprocess(scan.cloud, config.voxel_size, config.covariance)
        return Frame(cloud, len(scan.cloud), (time.perf_counter() - start) * 1e3)

    if not scan.source:
        return build()
    key = (scan.source, config.voxel_size, config.covariance.model_dump_json())
    return get_cached(key, build)


# =============================================================================
# SEQUENCE
# =============================================================================


def accumulate(relative_poses: Sequence[RigidTransform]) -> List[RigidTransform]:
    trajectory = [RigidTransform.identity()]
    for rel in relative_poses:
        trajectory.append(trajectory[-1] @ rel)
    return trajectory


def _reject(
    cloud: PointCloud, weights: NDArray[np.float64], ratio: float
) -> Tuple[PointCloud, NDArray[np.float64]]:
    keep = survivor_indices(weights, ratio)
    return cloud.select(keep), weights[keep]


def _align_pair(
    source: PointCloud,
    target: PointCloud,
    source_weights: Optional[NDArray[np.float64]],
    target_weights: Optional[NDArray[np.float64]],
    config: OdometryConfig,
    initial: RigidTransform,
) -> Tuple[RegistrationResult, float]:
    """Rejection + solve; returns the result and the surviving source percentage."""
    surviving_pct = 100.0
    ratio = config.rejection_ratio
    if ratio > 0.0 and source_weights is not None and target_weights is not None:
        src_kept, ws_kept = _reject(source, source_weights, ratio)
        tgt_kept, wt_kept = _reject(target, target_weights, ratio)
        k_min = config.covariance.k_neighbors
        if min(len(src_kept), len(tgt_kept)) < k_min:
            logger.warning(
                "rejection fallback ratio=%.2f survivors=%d k_neighbors=%d", ratio, min(len(src_kept), len(tgt_kept)), k_min
            )
        else:
            surviving_pct = 100.0 * len(src_kept) / len(source)
            source, target = src_kept, tgt_kept
            source_weights, target_weights = ws_kept, wt_kept

    if config.backend == Backend.ICP:
        return align_icp(source, target, config.lm, initial), surviving_pct
    if config.backend == Backend.GICP:
        return align_gicp(source, target, config.lm, initial), surviving_pct

    if source_weights is not None:
        source = source.with_weights(source_weights)
        target = target.with_weights(target_weights)
    problem = WgicpProblem(
        source=source,
        target=target,
        k_d=config.k_d,
        knn_temperature=config.knn_temperature,
        eps_w=config.eps_w,
        lm=config.lm,
    )
    return align_wgicp(problem, initial=initial), surviving_pct


def run_sequence(
    scans: Iterable[VelodyneScan], config: OdometryConfig, model: Optional[WeightModel] = None
) -> OdometryRun:
    """
    Register every scan onto its predecessor and accumulate the trajectory.

    A frame whose solver raises a numerical error keeps the identity as its
    relative pose and is flagged; the run continues.
    """
    run = OdometryRun(trajectory=[RigidTransform.identity()])
    iterator = iter(scans)
    try:
        first = next(iterator)
    except StopIteration:
        raise SequenceTooShort("odometry needs at least 2 scans, got 0") from None

    previous = preprocess_scan(first, config)
    previous_weights: Optional[NDArray[np.float64]] = None
    if model is not None:
        previous_weights = np.asarray(soft_reject(predict_weights(model, previous.cloud)))
    last_relative = RigidTransform.identity()

    t = 0
    for t, scan in enumerate(iterator, start=1):
        if config.max_frames is not None and t >= config.max_frames:
            break
        frame = preprocess_scan(scan, config)

        start = time.perf_counter()
        weights: Optional[NDArray[np.float64]] = None
        if model is not None:
            weights = np.asarray(soft_reject(predict_weights(model, frame.cloud)))
        inference_ms = (time.perf_counter() - start) * 1e3

        initial = last_relative if config.initial_guess == InitialGuess.CONSTANT_VELOCITY else RigidTransform.identity()
        start = time.perf_counter()
        flagged, error_type, surviving_pct, iterations = False, None, 100.0, 0
        try:
            result, surviving_pct = _align_pair(
                frame.cloud, previous.cloud, weights, previous_weights, config, initial
            )
            relative = result.transform
            iterations = result.iterations
            if not result.converged:
                logger.warning("frame=%d not converged iterations=%d", t, result.iterations)
        except (NumericalError, EmptyCloud, TooFewPoints) as e:
            flagged, error_type = True, e.error_type
            relative = RigidTransform.identity()
            logger.warning("frame=%d flagged error=%s message=%s", t, e.error_type, e.message)
        alignment_ms = (time.perf_counter() - start) * 1e3

        run.relative_poses.append(relative)
        run.trajectory.append(run.trajectory[-1] @ relative)
        run.timings.append(
            FrameTiming(
                frame=t,
                preprocess_ms=frame.preprocess_ms,
                inference_ms=inference_ms,
                alignment_ms=alignment_ms,
                iterations=iterations,
                source_points=len(frame.cloud),
                target_points=len(previous.cloud),
                surviving_pct=surviving_pct,
                flagged=flagged,
                error_type=error_type,
            )
        )
        logger.info(
            "frame=%d backend=%s points=%d alignment_ms=%.2f flagged=%s",
            t,
            config.backend.value,
            len(frame.cloud),
            alignment_ms,
            flagged,
        )
        previous, previous_weights, last_relative = frame, weights, relative

    if t == 0:
        raise SequenceTooShort("odometry needs at least 2 scans, got 1")
    return run


# =============================================================================
# METRICS
# =============================================================================


def _path_lengths(poses: Sequence[RigidTransform]) -> NDArray[np.float64]:
    positions = np.array([p.translation for p in poses])
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _relative_error(
    est_a: RigidTransform, est_b: RigidTransform, gt_a: RigidTransform, gt_b: RigidTransform
) -> RigidTransform:
    return (gt_a.inverse() @ gt_b).inverse() @ (est_a.inverse() @ est_b)


def _check_lengths(trajectory: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> None:
    if len(trajectory) != len(gt):
        raise SequenceTooShort(
            f"trajectory has {len(trajectory)} poses but ground truth has {len(gt)}",
            hint="Pass --max-frames consistently or trim the pose file",
        )


def kitti_errors(
    trajectory: Sequence[RigidTransform],
    gt: Sequence[RigidTransform],
    lengths: Sequence[float] = KITTI_LENGTHS,
) -> KittiErrors:
    """
    KITTI relative errors over sub-paths of 100..800 m of ground-truth length.

    Windows start at every frame; a window of length L ends at the first
    frame whose path distance from the start is at least L.
    """
    _check_lengths(trajectory, gt)
    dist = _path_lengths(gt)
    per_length = {L: ([], []) for L in lengths}
    for first in range(len(gt)):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="left"))
            if last >= len(gt):
                continue
            E = _relative_error(trajectory[first], trajectory[last], gt[first], gt[last])
            per_length[L][0].append(float(np.linalg.norm(E.translation)) / L)
            per_length[L][1].append(rotation_angle(E.rotation) / L)

    t_all = [e for L in lengths for e in per_length[L][0]]
    r_all = [e for L in lengths for e in per_length[L][1]]
    if not t_all:
        raise SequenceTooShort(
            f"ground-truth path is {dist[-1]:.1f} m, shorter than the {min(lengths):.0f} m window",
            context={"path_length": float(dist[-1])},
        )

    table = [
        SegmentError(
            length=L,
            t_err=float(np.mean(t)) * 100.0 if t else 0.0,
            r_err=float(np.mean(r)) * 100.0 * 180.0 / math.pi if r else 0.0,
            windows=len(t),
        )
        for L, (t, r) in per_length.items()
    ]
    return KittiErrors(
        t_rel=float(np.mean(t_all)) * 100.0,
        r_rel=float(np.mean(r_all)) * 100.0 * 180.0 / math.pi,
        windows=len(t_all),
        per_length=table,
    )


def trajectory_errors(trajectory: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> TrajectoryErrors:
    """Absolute RMSE (m) plus mean per-frame relative translation (m) and rotation (deg)."""
    _check_lengths(trajectory, gt)
    if len(gt) < 2:
        raise SequenceTooShort("trajectory errors need at least 2 poses")
    offsets = np.array([e.translation - g.translation for e, g in zip(trajectory, gt)])
    ate = math.sqrt(float(np.mean(np.sum(offsets**2, axis=1))))
    rel = [
        _relative_error(trajectory[i], trajectory[i + 1], gt[i], gt[i + 1]) for i in range(len(gt) - 1)
    ]
    return TrajectoryErrors(
        ate_rmse=ate,
        rpe_trans=float(np.mean([np.linalg.norm(E.translation) for E in rel])),
        rpe_rot=float(np.mean([math.degrees(rotation_angle(E.rotation)) for E in rel])),
    )
