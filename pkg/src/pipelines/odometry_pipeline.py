# odometry_pipeline.py
"""Run odometry over a KITTI-style sequence directory and write its outputs."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

from ..tools.geometry_tools import RigidTransform
from ..tools.kitti_io_tools import (
    ground_truth_in_lidar_frame,
    iter_scans,
    list_scans,
    read_calib,
    read_poses,
    to_camera_frame,
    write_trajectory,
)
from ..tools.odometry_tools import OdometryRun, run_sequence
from ..tools.plot_tools import plot_timing_breakdown, plot_trajectory
from ..tools.report_tools import odometry_metrics, timing_metrics, write_report
from ..tools.weight_tools import WeightModel, load_checkpoint
from ..utils.errors import SequenceTooShort
from ..utils.paths import ensure_parent_dir, sequence_paths, sibling_path
from ..utils.schemas import OdometryConfig

logger = logging.getLogger(__name__)


@dataclass
class SequenceData:
    scan_paths: List[str]
    calib: Optional[RigidTransform]
    gt: Optional[List[RigidTransform]]  # in L₁


@dataclass
class OdometryOutcome:
    run: OdometryRun
    metrics: Dict[str, float]
    timing: Dict[str, float]


def load_sequence(data_dir: str, gt_path: Optional[str] = None, max_frames: Optional[int] = None) -> SequenceData:
    paths = sequence_paths(data_dir, gt_path)
    scans = [str(p) for p in list_scans(paths.velodyne_dir)]
    if max_frames is not None:
        scans = scans[:max_frames]
    if len(scans) < 2:
        raise SequenceTooShort(f"{paths.velodyne_dir}: need at least 2 scans, found {len(scans)}")
    calib = read_calib(paths.calib) if paths.calib is not None else None
    gt = None
    if paths.poses is not None:
        gt = ground_truth_in_lidar_frame(read_poses(paths.poses, paths.calib))
        if len(gt) < len(scans):
            raise SequenceTooShort(f"{paths.poses}: {len(gt)} poses for {len(scans)} scans")
        gt = gt[: len(scans)]
    logger.info("sequence dir=%s scans=%d ground_truth=%s", data_dir, len(scans), gt is not None)
    return SequenceData(scans, calib, gt)


def load_model(config: OdometryConfig) -> Optional[WeightModel]:
    return load_checkpoint(config.model_path) if config.model_path else None


def evaluate_sequence(data: SequenceData, config: OdometryConfig, model: Optional[WeightModel]) -> OdometryOutcome:
    run = run_sequence(iter_scans(data.scan_paths), config, model)
    return OdometryOutcome(run=run, metrics=odometry_metrics(run, data.gt), timing=timing_metrics(run))


def run_odometry(
    data_dir: str,
    config: OdometryConfig,
    gt_path: Optional[str] = None,
    out_traj: Optional[str] = None,
    out_report: Optional[str] = None,
    plot_dir: Optional[str] = None,
) -> OdometryOutcome:
    data = load_sequence(data_dir, gt_path, config.max_frames)
    outcome = evaluate_sequence(data, config, load_model(config))

    if out_traj:
        ensure_parent_dir(out_traj)
        trajectory = outcome.run.trajectory
        if data.calib is not None:
            trajectory = to_camera_frame(trajectory, data.calib)
        write_trajectory(trajectory, out_traj)
    if out_report:
        write_report(outcome.metrics, out_report)
        write_report(outcome.timing, sibling_path(out_report, ".timing.tsv"))
    if plot_dir:
        plot_trajectory(outcome.run.trajectory, data.gt, plot_dir)
        plot_timing_breakdown(outcome.run, plot_dir)

    flagged = outcome.run.flagged_frames
    if flagged:
        logger.warning("flagged frames=%s", flagged)
    return outcome
