"""Figures for odometry runs and rejection sweeps (PNG, headless)."""

import logging
import os
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from ..utils.consts import TimingKeys  # noqa: E402
from ..utils.errors import FileIoError  # noqa: E402
from ..utils.paths import get_artifact_path  # noqa: E402
from ..utils.schemas import SweepRow  # noqa: E402
from .geometry_tools import RigidTransform  # noqa: E402
from .odometry_tools import OdometryRun  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, plot_dir: Optional[str], filename: str) -> str:
    directory = plot_dir or get_artifact_path()
    try:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, filename)
        fig.tight_layout()
        fig.savefig(path)
    except OSError as e:
        raise FileIoError(directory, e.strerror or str(e)) from e
    finally:
        plt.close(fig)
    logger.debug("figure written path=%s", path)
    return path


def plot_trajectory(
    trajectory: Sequence[RigidTransform],
    gt: Optional[Sequence[RigidTransform]] = None,
    plot_dir: Optional[str] = None,
    filename: str = "trajectory.png",
) -> str:
    """Top-down (x, y) view of the estimate, with ground truth when given."""
    est = np.array([T.translation for T in trajectory])
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(est[:, 0], est[:, 1], label="estimate")
    if gt is not None:
        ref = np.array([T.translation for T in gt])
        ax.plot(ref[:, 0], ref[:, 1], linestyle="--", label="ground truth")
    ax.scatter(est[:1, 0], est[:1, 1], marker="o", color="black", zorder=3)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("Trajectory (first frame)")
    ax.legend()
    return _save(fig, plot_dir, filename)


def plot_rejection_sweep(rows: Sequence[SweepRow], plot_dir: Optional[str] = None) -> List[str]:
    """Translational / rotational error and alignment time against rejection ratio."""
    df = pd.DataFrame([r.model_dump() for r in rows])
    df["voxel_size"] = df["voxel_size"].map(lambda v: f"{v:g} m")
    paths = []

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    sns.lineplot(data=df, x="rejection", y="t_rel", hue="voxel_size", marker="o", ax=axes[0])
    axes[0].set_ylabel("t_rel [%]")
    sns.lineplot(data=df, x="rejection", y="r_rel", hue="voxel_size", marker="o", ax=axes[1])
    axes[1].set_ylabel("r_rel [deg/100 m]")
    for ax in axes:
        ax.set_xlabel("rejection ratio")
    paths.append(_save(fig, plot_dir, "sweep_errors.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    sns.barplot(data=df, x="rejection", y="alignment_ms", hue="voxel_size", ax=ax)
    ax.set_xlabel("rejection ratio")
    ax.set_ylabel("mean alignment [ms]")
    paths.append(_save(fig, plot_dir, "sweep_alignment_ms.png"))
    return paths


def plot_timing_breakdown(run: OdometryRun, plot_dir: Optional[str] = None) -> str:
    """Stacked per-frame preprocess / inference / alignment times."""
    phases = [TimingKeys.PREPROCESS.value, TimingKeys.INFERENCE.value, TimingKeys.ALIGNMENT.value]
    df = pd.DataFrame([t.model_dump() for t in run.timings]).set_index("frame")[phases]
    fig, ax = plt.subplots(figsize=(8, 4))
    df.plot(kind="bar", stacked=True, ax=ax, color=sns.color_palette("deep", len(phases)), width=0.9)
    ax.set_xlabel("frame")
    ax.set_ylabel("time [ms]")
    ax.set_title("Per-frame timing")
    if len(df) > 20:
        ax.set_xticks(ax.get_xticks()[:: max(1, len(df) // 20)])
    return _save(fig, plot_dir, "timing.png")
