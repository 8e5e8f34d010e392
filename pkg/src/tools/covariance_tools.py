"""Per-point PCA covariances with GICP plane regularization."""

import logging
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from ..utils.errors import TooFewPoints
from ..utils.schemas import CovarianceParams, Regularization
from .geometry_tools import PointCloud
from .knn_tools import KdIndex

logger = logging.getLogger(__name__)

# Upper bound on gathered neighbor coordinates held at once (rows × k)
_CHUNK_ELEMENTS = 2_000_000


def _sample_covariances(neighborhoods: NDArray[np.float64]) -> NDArray[np.float64]:
    """(M, k, 3) neighborhoods -> (M, 3, 3) covariances normalized by k."""
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.swapaxes(centered, 1, 2) @ centered / neighborhoods.shape[1]
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def plane_regularize(cov: NDArray[np.float64], epsilon: float) -> NDArray[np.float64]:
    """Keep the eigenbasis, replace eigenvalues (descending) by (1, 1, epsilon)."""
    _, vecs = np.linalg.eigh(cov)  # ascending: column 0 is the normal direction
    diag = np.array([epsilon, 1.0, 1.0])
    reg = (vecs * diag) @ np.swapaxes(vecs, -1, -2)
    return 0.5 * (reg + np.swapaxes(reg, -1, -2))


def estimate_covariances(
    cloud: PointCloud, params: Optional[CovarianceParams] = None, index: Optional[KdIndex] = None
) -> PointCloud:
    """
    Sample covariance of every point's k nearest neighbors (itself included).

    Returns the same cloud with covariances attached. Under
    PlaneRegularized every covariance has eigenvalues exactly
    {1, 1, plane_epsilon}; Raw keeps the sample covariance.
    """
    params = params or CovarianceParams()
    n, k = len(cloud), params.k_neighbors
    if n < k:
        raise TooFewPoints(
            f"covariance estimation needs at least k_neighbors={k} points, got {n}",
            hint="Use a smaller voxel size or lower k_neighbors",
            context={"points": n, "k_neighbors": k},
        )

    points = cloud.points
    if k >= n:
        # Every neighborhood is the whole cloud
        cov = np.broadcast_to(_sample_covariances(points[None, :, :]), (n, 3, 3)).copy()
    else:
        index = index if index is not None else KdIndex(points)
        cov = np.empty((n, 3, 3))
        chunk = max(1, _CHUNK_ELEMENTS // k)
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            _, nb = index.query(points[start:stop], k)
            cov[start:stop] = _sample_covariances(points[nb])

    if params.regularization == Regularization.PLANE_REGULARIZED:
        cov = plane_regularize(cov, params.plane_epsilon)

    logger.debug("covariances n=%d k=%d regularization=%s", n, k, params.regularization.value)
    return cloud.with_covariances(cov)
