"""
Path handling for sequences, reports and artifacts.

A sequence directory follows the KITTI odometry layout, flattened so one
directory holds everything about a drive:

    <sequence>/velodyne/000000.bin, 000001.bin, ...
    <sequence>/calib.txt        (optional, needs a "Tr:" line)
    <sequence>/poses.txt        (optional ground truth, one 3x4 pose per line)
"""

import os
import tempfile
from pathlib import Path
from typing import NamedTuple, Optional

from .consts import PLOTS_SUBDIR


class SequencePaths(NamedTuple):
    root: Path
    velodyne_dir: Path
    calib: Optional[Path]
    poses: Optional[Path]


def sequence_paths(sequence_dir: str, gt_path: Optional[str] = None) -> SequencePaths:
    """
    Resolve the files of a sequence directory.

    Args:
        sequence_dir: Directory holding a `velodyne/` subdirectory
        gt_path: Explicit ground-truth pose file; overrides `<sequence>/poses.txt`

    Returns:
        SequencePaths with `calib` / `poses` set to None when absent

    Examples:
        >>> sequence_paths("data/04").velodyne_dir
        PosixPath('data/04/velodyne')
    """
    root = Path(sequence_dir)
    calib = root / "calib.txt"
    if gt_path is not None:
        poses: Optional[Path] = Path(gt_path)
    else:
        default_poses = root / "poses.txt"
        poses = default_poses if default_poses.is_file() else None
    return SequencePaths(
        root=root,
        velodyne_dir=root / "velodyne",
        calib=calib if calib.is_file() else None,
        poses=poses,
    )


def get_artifact_path(
    subdirectory: str = PLOTS_SUBDIR, filename: Optional[str] = None, create_dir: bool = True
) -> str:
    """
    Get a path for storing artifacts (figures) under the system temp dir.

    Args:
        subdirectory: Name of subdirectory within temp (e.g., "wgicp_plots")
        filename: Optional filename to append to the path
        create_dir: If True, create the directory if it doesn't exist (default: True)

    Returns:
        str: Absolute path to the artifact location
    """
    artifact_dir = os.path.join(tempfile.gettempdir(), subdirectory)

    if create_dir:
        os.makedirs(artifact_dir, exist_ok=True)

    if filename:
        return os.path.join(artifact_dir, filename)

    return artifact_dir


def ensure_parent_dir(path: str) -> None:
    """Create the directory that will hold `path`, if it has one."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def sibling_path(path: str, suffix: str) -> str:
    """`report.tsv` + `.timing.tsv` -> `report.timing.tsv`."""
    base, ext = os.path.splitext(path)
    if ext in (".tsv", ".txt"):
        return base + suffix
    return path + suffix
