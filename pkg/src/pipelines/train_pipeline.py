# train_pipeline.py
"""Train the weight model on consecutive frame pairs of a sequence."""

import logging
from typing import List, Optional

import numpy as np

from ..tools.kitti_io_tools import list_scans, read_poses, read_velodyne_bin, relative_ground_truth
from ..tools.odometry_tools import preprocess
from ..tools.registration_tools import WgicpProblem, align_wgicp
from ..tools.report_tools import write_loss_history
from ..tools.weight_tools import (
    TrainingPair,
    WeightModel,
    hard_reject,
    pose_loss,
    predict_weights,
    save_checkpoint,
    soft_reject,
    train,
)
from ..utils.consts import DEFAULT_VOXEL_SIZE
from ..utils.errors import InvalidConfig, SequenceTooShort
from ..utils.paths import ensure_parent_dir, sequence_paths
from ..utils.schemas import CovarianceParams, TrainConfig, TrainSummary

logger = logging.getLogger(__name__)


def load_training_pairs(
    data_dir: str,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    covariance: Optional[CovarianceParams] = None,
    max_pairs: Optional[int] = None,
) -> List[TrainingPair]:
    """(cloud_{t−1}, cloud_t, T̃_gt) for every consecutive pair, preprocessed."""
    paths = sequence_paths(data_dir)
    if paths.poses is None:
        raise InvalidConfig(f"{data_dir}: training needs ground-truth poses (poses.txt)")
    scans = list_scans(paths.velodyne_dir)
    pose_file = read_poses(paths.poses, paths.calib)
    n = min(len(scans), len(pose_file))
    if max_pairs is not None:
        n = min(n, max_pairs + 1)
    if n < 2:
        raise SequenceTooShort(f"{data_dir}: need at least 2 frames with poses, found {n}")

    clouds = [preprocess(read_velodyne_bin(scans[t]).cloud, voxel_size, covariance) for t in range(n)]
    pairs = [TrainingPair(clouds[t - 1], clouds[t], relative_ground_truth(pose_file, t)) for t in range(1, n)]
    logger.info("training pairs=%d voxel_size=%.3f", len(pairs), voxel_size)
    return pairs


def hard_rejection_loss(model: WeightModel, pairs: List[TrainingPair], config: TrainConfig) -> float:
    """Mean pose loss of the fast solver after hard rejection at `config.rejection_ratio`."""
    losses = []
    for pair in pairs:
        ws = np.asarray(soft_reject(predict_weights(model, pair.current)))
        wt = np.asarray(soft_reject(predict_weights(model, pair.previous)))
        problem = WgicpProblem(
            source=hard_reject(pair.current.with_weights(ws), ws, config.rejection_ratio),
            target=hard_reject(pair.previous.with_weights(wt), wt, config.rejection_ratio),
            k_d=config.k_d,
            knn_temperature=config.knn_temperature,
        )
        losses.append(pose_loss(align_wgicp(problem).transform, pair.gt))
    return float(np.mean(losses))


def run_training(
    pairs: List[TrainingPair],
    config: TrainConfig,
    out_model: str,
    loss_history_path: Optional[str] = None,
) -> TrainSummary:
    model = WeightModel.init(config.seed)
    trained, summary = train(model, pairs, config)

    ensure_parent_dir(out_model)
    save_checkpoint(trained, out_model)
    history_path = loss_history_path or out_model + ".loss.tsv"
    write_loss_history(summary.loss_history, history_path)
    logger.info(
        "trained epochs=%d initial_loss=%s final_loss=%s model=%s",
        summary.epochs,
        summary.initial_loss,
        summary.final_loss,
        out_model,
    )
    if config.rejection_ratio > 0.0:
        logger.info(
            "hard rejection ratio=%.2f mean_pose_loss=%.6f",
            config.rejection_ratio,
            hard_rejection_loss(trained, pairs, config),
        )
    return summary
