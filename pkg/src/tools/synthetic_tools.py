"""Synthetic scenes, registration pairs, sequences and outlier datasets.

Everything is generated from a numpy Generator, so a seed fixes the data.
Scenes are built from planes and simple solids so that plane-regularized
covariances are well defined everywhere.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from .geometry_tools import PointCloud, RigidTransform
from .kitti_io_tools import format_pose_line, write_trajectory, write_velodyne_bin

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _plane(rng: np.random.Generator, n: int, origin, u, v) -> NDArray[np.float64]:
    s = rng.uniform(0.0, 1.0, size=(n, 2))
    return np.asarray(origin) + s[:, :1] * np.asarray(u) + s[:, 1:] * np.asarray(v)


def _sphere(rng: np.random.Generator, n: int, center, radius: float) -> NDArray[np.float64]:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d


def _box(rng: np.random.Generator, n: int, lower, size) -> NDArray[np.float64]:
    lower, size = np.asarray(lower, dtype=float), np.asarray(size, dtype=float)
    faces = []
    per_face = max(1, -(-n // 6))
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        u = np.zeros(3)
        u[a] = size[a]
        v = np.zeros(3)
        v[b] = size[b]
        for side in (0.0, 1.0):
            origin = lower.copy()
            origin[axis] += side * size[axis]
            faces.append(_plane(rng, per_face, origin, u, v))
    return np.concatenate(faces)[:n]


def make_scene(rng: np.random.Generator, n_points: int = 1000) -> PointCloud:
    """Floor, two walls, a box and a sphere inside roughly [−2, 2]³ m."""
    parts = [
        (0.30, lambda n: _plane(rng, n, (-2.0, -2.0, -1.0), (4.0, 0.0, 0.0), (0.0, 4.0, 0.0))),
        (0.20, lambda n: _plane(rng, n, (2.0, -2.0, -1.0), (0.0, 4.0, 0.0), (0.0, 0.0, 2.5))),
        (0.20, lambda n: _plane(rng, n, (-2.0, 2.0, -1.0), (4.0, 0.0, 0.0), (0.0, 0.0, 2.5))),
        (0.15, lambda n: _box(rng, n, (-1.2, -1.0, -1.0), (0.8, 0.6, 0.9))),
        (0.15, lambda n: _sphere(rng, n, (0.8, 0.2, 0.0), 0.5)),
    ]
    counts = [int(frac * n_points) for frac, _ in parts]
    counts[0] += n_points - sum(counts)
    points = np.concatenate([build(c) for (_, build), c in zip(parts, counts)])
    return PointCloud(points)


def random_transform(
    rng: np.random.Generator, max_angle_deg: float = 15.0, max_translation: float = 0.5
) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_angle_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    translation = direction * rng.uniform(0.0, max_translation)
    return RigidTransform(Rotation.from_rotvec(axis * angle).as_matrix(), translation)


def transform_from(angle_deg: float, axis=(0.0, 0.0, 1.0), translation=(0.0, 0.0, 0.0)) -> RigidTransform:
    axis = np.asarray(axis, dtype=float)
    rotvec = axis / np.linalg.norm(axis) * math.radians(angle_deg)
    return RigidTransform(Rotation.from_rotvec(rotvec).as_matrix(), translation)


def make_pair(
    rng: np.random.Generator,
    transform: RigidTransform,
    n_points: int = 1000,
    noise: float = 0.0,
) -> Tuple[PointCloud, PointCloud]:
    """(source, target) with target = transform · source + N(0, noise²)."""
    source = make_scene(rng, n_points)
    target = transform.apply(source.points) + rng.normal(scale=noise, size=source.points.shape)
    return source, PointCloud(target)


# =============================================================================
# OUTLIER DATASET
# =============================================================================


@dataclass(frozen=True)
class OutlierPair:
    """Static scene plus a moving blob; `gt` maps source into target."""

    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    outliers: NDArray[np.intp]  # blob indices in the source cloud


def make_outlier_pair(
    rng: np.random.Generator,
    n_points: int = 400,
    outlier_fraction: float = 0.2,
    transform: Optional[RigidTransform] = None,
    blob_motion=(0.6, 0.4, 0.0),
    noise: float = 0.005,
) -> OutlierPair:
    """
    A scene whose blob of points (a dynamic object) moves by an extra
    translation between the clouds, so it is inconsistent with `gt`.
    """
    gt = transform or random_transform(rng, max_angle_deg=5.0, max_translation=0.2)
    n_blob = int(round(outlier_fraction * n_points))
    static = make_scene(rng, n_points - n_blob).points
    blob = _sphere(rng, n_blob, (-0.5, 1.2, -0.3), 0.35)
    source = np.concatenate([static, blob])

    moved_blob = blob + np.asarray(blob_motion, dtype=float)
    target = gt.apply(np.concatenate([static, moved_blob]))
    target = target + rng.normal(scale=noise, size=target.shape)
    outliers = np.arange(len(static), len(source), dtype=np.intp)
    return OutlierPair(PointCloud(source), PointCloud(target), gt, outliers)


# =============================================================================
# SEQUENCES
# =============================================================================


def make_corridor(rng: np.random.Generator, length: float, density: float = 12.0) -> NDArray[np.float64]:
    """Corridor along +x: floor, two walls and a pillar every 4 m, `density` points per m²."""
    x0, x1 = -10.0, length + 10.0
    span = x1 - x0

    def count(area: float) -> int:
        return max(1, int(density * area))

    parts = [
        _plane(rng, count(span * 6.0), (x0, -3.0, -1.5), (span, 0.0, 0.0), (0.0, 6.0, 0.0)),
        _plane(rng, count(span * 3.0), (x0, -3.0, -1.5), (span, 0.0, 0.0), (0.0, 0.0, 3.0)),
        _plane(rng, count(span * 3.0), (x0, 3.0, -1.5), (span, 0.0, 0.0), (0.0, 0.0, 3.0)),
    ]
    for i, x in enumerate(np.arange(x0 + 2.0, x1, 4.0)):
        y = -1.8 if i % 2 else 1.4
        parts.append(_box(rng, count(4.0), (x, y, -1.5), (0.4, 0.4, 2.0 + 0.3 * (i % 3))))
    return np.concatenate(parts)


@dataclass(frozen=True)
class SyntheticSequence:
    clouds: List[PointCloud]  # frame t in its own sensor frame
    poses: List[RigidTransform]  # sensor poses in L₁ (poses[0] = I)


def make_sequence(
    rng: np.random.Generator,
    n_frames: int,
    step: RigidTransform,
    sensor_range: float = 8.0,
    noise: float = 0.0,
    density: float = 12.0,
) -> SyntheticSequence:
    """Constant-motion drive down a corridor; each frame sees the world within `sensor_range`."""
    poses = [RigidTransform.identity()]
    for _ in range(n_frames - 1):
        poses.append(poses[-1] @ step)
    length = max(float(np.linalg.norm(poses[-1].translation)), 1.0)
    world = make_corridor(rng, length, density)

    clouds = []
    for pose in poses:
        visible = world[np.linalg.norm(world - pose.translation, axis=1) <= sensor_range]
        local = pose.inverse().apply(visible)
        clouds.append(PointCloud(local + rng.normal(scale=noise, size=local.shape)))
    return SyntheticSequence(clouds, poses)


def write_sequence(
    directory: PathLike,
    sequence: SyntheticSequence,
    rng: np.random.Generator,
    calib: Optional[RigidTransform] = None,
) -> Path:
    """
    Lay out a KITTI-style sequence: `velodyne/NNNNNN.bin`, `calib.txt`
    and `poses.txt` (camera frame, calib · P_t · calib⁻¹).
    """
    root = Path(directory)
    velodyne = root / "velodyne"
    velodyne.mkdir(parents=True, exist_ok=True)
    for t, cloud in enumerate(sequence.clouds):
        reflectance = rng.uniform(0.0, 1.0, size=len(cloud))
        write_velodyne_bin(velodyne / f"{t:06d}.bin", cloud.points, reflectance)

    calib = calib or RigidTransform.identity()
    (root / "calib.txt").write_text(f"Tr: {format_pose_line(calib)}\n", encoding="utf-8")
    c_inv = calib.inverse()
    write_trajectory([calib @ pose @ c_inv for pose in sequence.poses], root / "poses.txt")
    logger.debug("wrote synthetic sequence dir=%s frames=%d", root, len(sequence.clouds))
    return root
