"""KITTI odometry ingestion: Velodyne scans, poses, calibration, trajectories.

Formats
- Velodyne `.bin`: little-endian float32 × 4 (x, y, z, reflectance) per point.
- Pose text: one row-major 3×4 matrix (12 reals) per line, frame k on line k.
- `calib.txt`: a `Tr:` line with 12 reals mapping Velodyne to camera frame.
- Text clouds: whitespace-separated x y z [extra columns ignored], `#` comments.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from ..utils.consts import POSE_REPROJECT_TOL, VELODYNE_RECORD_BYTES
from ..utils.errors import FileIoError, InvalidCloud, MalformedLine, NonRotation, TruncatedFile
from .geometry_tools import PointCloud, RigidTransform, nearest_rotation

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_CALIB_KEYS = ("Tr:", "Tr_velo_to_cam:")


@dataclass(frozen=True)
class VelodyneScan:
    cloud: PointCloud
    reflectances: NDArray[np.float64]
    source: str = ""

    def __len__(self) -> int:
        return len(self.cloud)


@dataclass(frozen=True)
class PoseFile:
    """Ground-truth poses (camera frame of frame 0) plus Velodyne→camera calibration."""

    poses: List[RigidTransform]
    calib: RigidTransform = field(default_factory=RigidTransform.identity)

    def __len__(self) -> int:
        return len(self.poses)


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e


def _read_lines(path: PathLike) -> List[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise MalformedLine(str(path), 0, f"not UTF-8 text (byte offset {e.start})") from e
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e


# =============================================================================
# VELODYNE SCANS
# =============================================================================


def read_velodyne_bin(path: PathLike) -> VelodyneScan:
    data = _read_bytes(path)
    remainder = len(data) % VELODYNE_RECORD_BYTES
    if remainder:
        raise TruncatedFile(str(path), len(data) - remainder, VELODYNE_RECORD_BYTES)

    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(records), axis=1)
    if not np.all(finite):
        bad = int(np.argmin(finite))
        raise InvalidCloud(
            f"{path}: non-finite value in record at byte offset {bad * VELODYNE_RECORD_BYTES}",
            context={"path": str(path), "byte_offset": bad * VELODYNE_RECORD_BYTES},
        )
    reflectances = records[:, 3]
    out_of_range = (reflectances < 0.0) | (reflectances > 1.0)
    if np.any(out_of_range):
        bad = int(np.argmax(out_of_range))
        raise InvalidCloud(
            f"{path}: reflectance {reflectances[bad]} outside [0, 1] "
            f"at byte offset {bad * VELODYNE_RECORD_BYTES}",
            context={"path": str(path), "byte_offset": bad * VELODYNE_RECORD_BYTES},
        )
    reflectances = reflectances.copy()
    reflectances.flags.writeable = False
    return VelodyneScan(PointCloud(records[:, :3]), reflectances, source=str(path))


def write_velodyne_bin(path: PathLike, points, reflectances=None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    refl = np.zeros(len(pts)) if reflectances is None else np.asarray(reflectances).reshape(-1)
    records = np.column_stack([pts, refl]).astype("<f4")
    try:
        Path(path).write_bytes(records.tobytes())
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e


def read_xyz_text(path: PathLike) -> PointCloud:
    rows: List[List[float]] = []
    offset = 0
    for line_index, raw in enumerate(_read_lines(path)):
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens = line.split()
            if len(tokens) < 3:
                raise MalformedLine(
                    str(path), line_index, f"expected x y z, got {len(tokens)} value(s) (byte offset {offset})"
                )
            try:
                xyz = [float(t) for t in tokens[:3]]
            except ValueError as e:
                raise MalformedLine(str(path), line_index, f"{e} (byte offset {offset})") from e
            if not all(np.isfinite(xyz)):
                raise MalformedLine(str(path), line_index, f"non-finite coordinate (byte offset {offset})")
            rows.append(xyz)
        offset += len(raw.encode("utf-8")) + 1
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def read_cloud(path: PathLike) -> PointCloud:
    """Auto-detect by extension: `.bin` is a Velodyne scan, anything else xyz text."""
    if Path(path).suffix.lower() == ".bin":
        return read_velodyne_bin(path).cloud
    return read_xyz_text(path)


def list_scans(velodyne_dir: PathLike) -> List[Path]:
    directory = Path(velodyne_dir)
    if not directory.is_dir():
        raise FileIoError(str(directory), "velodyne directory not found")
    return sorted(directory.glob("*.bin"))


def iter_scans(paths: Sequence[PathLike]) -> Iterator[VelodyneScan]:
    for path in paths:
        yield read_velodyne_bin(path)


# =============================================================================
# POSES / CALIBRATION
# =============================================================================


def _parse_matrix(tokens: Sequence[str], path: PathLike, line_index: int) -> RigidTransform:
    if len(tokens) != 12:
        raise MalformedLine(str(path), line_index, f"expected 12 reals, got {len(tokens)}")
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as e:
        raise MalformedLine(str(path), line_index, str(e)) from e
    if not np.all(np.isfinite(values)):
        raise MalformedLine(str(path), line_index, "non-finite value")

    m = values.reshape(3, 4)
    if np.linalg.det(m[:, :3]) <= 0.0:
        raise NonRotation(str(path), line_index, float("inf"))
    R = nearest_rotation(m[:, :3])
    deviation = float(np.max(np.abs(R - m[:, :3])))
    if deviation >= POSE_REPROJECT_TOL:
        raise NonRotation(str(path), line_index, deviation)
    return RigidTransform(R, m[:, 3], check=False)


def read_calib(path: PathLike) -> RigidTransform:
    for line_index, raw in enumerate(_read_lines(path)):
        for key in _CALIB_KEYS:
            if raw.startswith(key):
                return _parse_matrix(raw[len(key):].split(), path, line_index)
    raise MalformedLine(str(path), 0, "no 'Tr:' calibration line")


def read_poses(path: PathLike, calib_path: Optional[PathLike] = None) -> PoseFile:
    """Line k is the pose of frame k; blank lines are only allowed after the last pose."""
    lines = _read_lines(path)
    while lines and not lines[-1].strip():
        lines.pop()
    poses: List[RigidTransform] = []
    for line_index, raw in enumerate(lines):
        if not raw.strip():
            raise MalformedLine(str(path), line_index, "blank line")
        poses.append(_parse_matrix(raw.split(), path, line_index))
    calib = read_calib(calib_path) if calib_path is not None else RigidTransform.identity()
    logger.debug("read poses path=%s frames=%d", path, len(poses))
    return PoseFile(poses=poses, calib=calib)


def format_pose_line(T: RigidTransform) -> str:
    """12 reals, row-major 3×4, 17 significant digits."""
    values = T.matrix[:3, :].reshape(-1) + 0.0  # + 0.0 turns -0.0 into 0.0
    return " ".join(f"{v:.17g}" for v in values)


def write_trajectory(poses: Sequence[RigidTransform], path: PathLike) -> None:
    text = "".join(format_pose_line(T) + "\n" for T in poses)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e


def relative_ground_truth(pose_file: PoseFile, t: int) -> RigidTransform:
    """T̃_gt for pair (t−1, t) in the Velodyne frame: calib⁻¹ · pose_{t−1}⁻¹ · pose_t · calib."""
    if not 1 <= t < len(pose_file.poses):
        raise IndexError(f"frame {t} has no predecessor in {len(pose_file.poses)} poses")
    c = pose_file.calib
    rel = pose_file.poses[t - 1].inverse() @ pose_file.poses[t]
    return c.inverse() @ rel @ c


def ground_truth_in_lidar_frame(pose_file: PoseFile) -> List[RigidTransform]:
    """Ground truth re-expressed in L₁ (the first scan's Velodyne frame)."""
    if not pose_file.poses:
        return []
    c, c_inv = pose_file.calib, pose_file.calib.inverse()
    first_inv = pose_file.poses[0].inverse()
    return [c_inv @ first_inv @ pose @ c for pose in pose_file.poses]


def to_camera_frame(trajectory: Sequence[RigidTransform], calib: RigidTransform) -> List[RigidTransform]:
    """calib · T_t · calib⁻¹ for writing in the KITTI camera convention."""
    c_inv = calib.inverse()
    return [calib @ T @ c_inv for T in trajectory]
