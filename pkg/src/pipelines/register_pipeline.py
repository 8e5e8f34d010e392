# register_pipeline.py
"""Register one cloud pair: read, preprocess, align."""

import logging
from typing import Optional, Tuple

from ..tools.covariance_tools import estimate_covariances
from ..tools.geometry_tools import PointCloud, voxel_downsample
from ..tools.kitti_io_tools import read_cloud
from ..tools.registration_tools import RegistrationResult, WgicpProblem, align_gicp, align_icp, align_wgicp
from ..utils.errors import TooFewPoints
from ..utils.schemas import Backend, CovarianceParams, RegisterConfig

logger = logging.getLogger(__name__)


def _prepare(cloud: PointCloud, config: RegisterConfig) -> PointCloud:
    if config.voxel_size is not None:
        cloud = voxel_downsample(cloud, config.voxel_size)
    if config.backend == Backend.ICP:
        return cloud
    params = config.covariance
    if len(cloud) < params.k_neighbors:
        if len(cloud) < 3:
            raise TooFewPoints(f"covariance estimation needs at least 3 points, got {len(cloud)}")
        params = CovarianceParams(
            k_neighbors=len(cloud), plane_epsilon=params.plane_epsilon, regularization=params.regularization
        )
        logger.warning("k_neighbors lowered to cloud size=%d", len(cloud))
    return estimate_covariances(cloud, params)


def register_clouds(source: PointCloud, target: PointCloud, config: RegisterConfig) -> RegistrationResult:
    source, target = _prepare(source, config), _prepare(target, config)
    logger.info(
        "register backend=%s source_points=%d target_points=%d", config.backend.value, len(source), len(target)
    )
    if config.backend == Backend.ICP:
        return align_icp(source, target, config.lm)
    if config.backend == Backend.GICP:
        return align_gicp(source, target, config.lm)
    problem = WgicpProblem(
        source=source, target=target, k_d=config.k_d, knn_temperature=config.knn_temperature, lm=config.lm
    )
    return align_wgicp(problem)


def run_register(
    source_path: str, target_path: str, config: RegisterConfig
) -> Tuple[RegistrationResult, Optional[str]]:
    """Returns the result and a warning line when the solver stopped early."""
    result = register_clouds(read_cloud(source_path), read_cloud(target_path), config)
    note = None
    if not result.converged:
        note = f"solver stopped after {result.iterations} iterations without meeting update_tol"
        logger.warning(note)
    return result, note
