"""Exact k-nearest-neighbor search and soft correspondence weights.

`KdIndex` wraps `scipy.spatial.cKDTree` over a read-only snapshot of a
cloud. Query results are ordered by (distance, index): among equidistant
points the lower index comes first, so every result equals the
brute-force oracle `brute_force_knn` exactly.

Soft KNN turns the K_d nearest distances into softmax weights

    w_ij = exp(−d_ij/τ) / Σ_j exp(−d_ij/τ)

and the weighted variant divides each distance by max(w_j, ε_w) first,
so low-weight target points lose their share of the correspondence.
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from ..utils.consts import DEFAULT_KNN_TEMPERATURE, DEFAULT_LEAF_SIZE, EPS_W
from ..utils.errors import EmptyCloud, InvalidCloud
from .geometry_tools import PointCloud, as_point3

logger = logging.getLogger(__name__)

# Extra neighbors fetched so ties at the k-th distance can be resolved by index
_TIE_MARGIN = 4

_WORKERS: int = os.cpu_count() or 1


def configure_workers(workers: Optional[int]) -> None:
    """Thread count for KD-tree queries (None or <1 = all cores). Results do not depend on it."""
    global _WORKERS
    _WORKERS = workers if workers and workers > 0 else (os.cpu_count() or 1)
    logger.debug("knn workers=%d", _WORKERS)


def _distances(queries: NDArray[np.float64], neighbors: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.sqrt(np.sum((neighbors - queries[:, None, :]) ** 2, axis=-1))


def _order_by_distance_then_index(
    dist: NDArray[np.float64], idx: NDArray[np.intp]
) -> Tuple[NDArray[np.float64], NDArray[np.intp]]:
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, axis=-1), np.take_along_axis(idx, order, axis=-1)


def brute_force_knn(
    points, queries, k: int
) -> Tuple[NDArray[np.float64], NDArray[np.intp]]:
    """O(n·m) oracle with the (distance, index) tie rule."""
    pts = np.asarray(points, dtype=np.float64)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = len(pts)
    if n == 0:
        raise EmptyCloud("cannot search an empty cloud")
    k_eff = min(k, n)
    idx = np.broadcast_to(np.arange(n), (len(q), n))
    dist = _distances(q, np.broadcast_to(pts, (len(q), n, 3)))
    dist, idx = _order_by_distance_then_index(dist, idx)
    return dist[:, :k_eff], idx[:, :k_eff]


class KdIndex:
    """Balanced KD-tree over an immutable snapshot of a cloud."""

    def __init__(self, points, leaf_size: int = DEFAULT_LEAF_SIZE) -> None:
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidCloud(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise EmptyCloud("cannot build a KD-tree over an empty cloud")
        pts.flags.writeable = False
        self._points = pts
        self.leaf_size = leaf_size
        self._tree = cKDTree(pts, leafsize=leaf_size, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> NDArray[np.float64]:
        return self._points

    def query(self, queries, k: int) -> Tuple[NDArray[np.float64], NDArray[np.intp]]:
        """
        k nearest neighbors of each query row.

        Returns (distances, indices), both (M, min(k, n)), rows sorted by
        nondecreasing distance with ties broken by lower index.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self._points)
        k_eff = min(k, n)
        if len(q) == 0:
            return np.zeros((0, k_eff)), np.zeros((0, k_eff), dtype=np.intp)

        k_fetch = min(n, k_eff + _TIE_MARGIN)
        _, idx = self._tree.query(q, k=k_fetch, workers=_WORKERS)
        idx = np.asarray(idx, dtype=np.intp).reshape(len(q), k_fetch)
        dist = _distances(q, self._points[idx])
        dist, idx = _order_by_distance_then_index(dist, idx)

        farthest_fetched = dist[:, -1]
        dist, idx = dist[:, :k_eff].copy(), idx[:, :k_eff].copy()
        if k_fetch < n:
            # Rows whose fetched set may end inside a tie at the k-th distance
            kth = dist[:, -1]
            ambiguous = np.nonzero(farthest_fetched <= kth * (1.0 + 1e-12))[0]
            for row in ambiguous:
                dist[row], idx[row] = self._resolve_ties(q[row], kth[row], k_eff)
        return dist, idx

    def _resolve_ties(
        self, query: NDArray[np.float64], radius: float, k: int
    ) -> Tuple[NDArray[np.float64], NDArray[np.intp]]:
        """Exact k-NN of one query from every point within the tie radius."""
        cand = np.asarray(
            self._tree.query_ball_point(query, r=radius * (1.0 + 1e-9) + 1e-300), dtype=np.intp
        )
        d = _distances(query[None, :], self._points[cand][None, :, :])
        d, i = _order_by_distance_then_index(d, cand[None, :])
        return d[0, :k], i[0, :k]


def build(cloud: PointCloud, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdIndex:
    if cloud.is_empty:
        raise EmptyCloud("cannot build a KD-tree over an empty cloud")
    return KdIndex(cloud.points, leaf_size=leaf_size)


# =============================================================================
# SOFT KNN
# =============================================================================


@dataclass(frozen=True)
class SoftNeighbors:
    neighbor_indices: NDArray[np.intp]  # (K_d,)
    knn_weights: NDArray[np.float64]  # (K_d,), sums to 1
    distances: NDArray[np.float64]  # (K_d,), unscaled meters


def knn_softmax(scaled_distances: NDArray[np.float64]) -> NDArray[np.float64]:
    """Softmax of −d along the last axis, max-subtracted."""
    s = -np.asarray(scaled_distances, dtype=np.float64)
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=-1, keepdims=True)


def scale_distances(
    distances: NDArray[np.float64],
    neighbor_weights: Optional[NDArray[np.float64]],
    temperature: float = DEFAULT_KNN_TEMPERATURE,
    eps_w: float = EPS_W,
) -> NDArray[np.float64]:
    d = np.asarray(distances, dtype=np.float64)
    if neighbor_weights is not None:
        d = d / np.maximum(neighbor_weights, eps_w)
    return d / temperature


def soft_knn(
    index: KdIndex, query, k_d: int, temperature: float = DEFAULT_KNN_TEMPERATURE
) -> SoftNeighbors:
    if k_d < 1:
        raise ValueError(f"k_d must be >= 1, got {k_d}")
    dist, idx = index.query(as_point3(query), k_d)
    weights = knn_softmax(scale_distances(dist[0], None, temperature))
    return SoftNeighbors(neighbor_indices=idx[0], knn_weights=weights, distances=dist[0])


def soft_knn_weighted(
    index: KdIndex,
    query,
    k_d: int,
    target_weights,
    temperature: float = DEFAULT_KNN_TEMPERATURE,
    eps_w: float = EPS_W,
) -> SoftNeighbors:
    if k_d < 1:
        raise ValueError(f"k_d must be >= 1, got {k_d}")
    w = np.asarray(target_weights, dtype=np.float64)
    if w.shape != (len(index),):
        raise InvalidCloud(f"{len(w)} target weights for {len(index)} points")
    dist, idx = index.query(as_point3(query), k_d)
    weights = knn_softmax(scale_distances(dist[0], w[idx[0]], temperature, eps_w))
    return SoftNeighbors(neighbor_indices=idx[0], knn_weights=weights, distances=dist[0])


def soft_knn_batch(
    index: KdIndex,
    queries,
    k_d: int,
    target_weights=None,
    temperature: float = DEFAULT_KNN_TEMPERATURE,
    eps_w: float = EPS_W,
) -> Tuple[NDArray[np.intp], NDArray[np.float64]]:
    """Vectorized soft KNN: (indices (M, K), weights (M, K))."""
    dist, idx = index.query(queries, k_d)
    nb_w = None if target_weights is None else np.asarray(target_weights, dtype=np.float64)[idx]
    return idx, knn_softmax(scale_distances(dist, nb_w, temperature, eps_w))
