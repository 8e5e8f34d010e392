"""TSV reports: odometry metrics, per-phase timings, sweeps and loss history.

Key-value reports are `metric<TAB>value` lines with no header; tables
(sweep, loss history) carry a header row. Floats use a fixed `%.6f`
format so reruns with the same inputs are byte-identical. Timings are
kept out of the metrics report for the same reason.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from ..utils.consts import ReportKeys, TimingKeys
from ..utils.errors import FileIoError, SequenceTooShort
from ..utils.paths import ensure_parent_dir
from ..utils.schemas import SweepRow
from .geometry_tools import RigidTransform
from .odometry_tools import OdometryRun, kitti_errors, trajectory_errors

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Value = Union[int, float]

FLOAT_FORMAT = "%.6f"


def format_value(value: Value) -> str:
    if isinstance(value, int):
        return str(value)
    if math.isnan(value):
        return "nan"
    return FLOAT_FORMAT % value


def odometry_metrics(run: OdometryRun, gt: Optional[Sequence[RigidTransform]] = None) -> Dict[str, Value]:
    """Accuracy and bookkeeping metrics; metrics needing ground truth are NaN without it."""
    timings = run.timings
    metrics: Dict[str, Value] = {
        ReportKeys.FRAMES.value: len(run.trajectory),
        ReportKeys.FLAGGED_FRAMES.value: len(run.flagged_frames),
        ReportKeys.MEAN_POINTS.value: float(sum(t.source_points for t in timings) / len(timings)) if timings else 0.0,
        ReportKeys.SURVIVING_PCT.value: run.mean_timing("surviving_pct"),
        ReportKeys.T_REL.value: math.nan,
        ReportKeys.R_REL.value: math.nan,
        ReportKeys.ATE_RMSE.value: math.nan,
        ReportKeys.RPE_TRANS.value: math.nan,
        ReportKeys.RPE_ROT.value: math.nan,
    }
    if gt is None:
        return metrics

    gt = list(gt)[: len(run.trajectory)]
    try:
        kitti = kitti_errors(run.trajectory, gt)
        metrics[ReportKeys.T_REL.value] = kitti.t_rel
        metrics[ReportKeys.R_REL.value] = kitti.r_rel
    except SequenceTooShort as e:
        logger.warning("kitti errors unavailable: %s", e.message)
    errors = trajectory_errors(run.trajectory, gt)
    metrics[ReportKeys.ATE_RMSE.value] = errors.ate_rmse
    metrics[ReportKeys.RPE_TRANS.value] = errors.rpe_trans
    metrics[ReportKeys.RPE_ROT.value] = errors.rpe_rot
    return metrics


def timing_metrics(run: OdometryRun) -> Dict[str, Value]:
    pre = run.mean_timing(TimingKeys.PREPROCESS.value)
    inf = run.mean_timing(TimingKeys.INFERENCE.value)
    ali = run.mean_timing(TimingKeys.ALIGNMENT.value)
    return {
        TimingKeys.PREPROCESS.value: pre,
        TimingKeys.INFERENCE.value: inf,
        TimingKeys.ALIGNMENT.value: ali,
        TimingKeys.TOTAL.value: pre + inf + ali,
    }


def _write_frame(df: pd.DataFrame, path: PathLike, header: bool) -> None:
    try:
        ensure_parent_dir(str(path))
        df.to_csv(path, sep="\t", index=False, header=header, lineterminator="\n")
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e


def write_report(metrics: Dict[str, Value], path: PathLike) -> None:
    df = pd.DataFrame({"metric": list(metrics), "value": [format_value(v) for v in metrics.values()]})
    _write_frame(df, path, header=False)


def read_report(path: PathLike) -> Dict[str, str]:
    try:
        df = pd.read_csv(path, sep="\t", header=None, names=["metric", "value"], dtype=str, keep_default_na=False)
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e
    return dict(zip(df["metric"], df["value"]))


def sweep_frame(rows: Sequence[SweepRow]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in rows], columns=list(SweepRow.model_fields))


def write_sweep(rows: Sequence[SweepRow], path: PathLike) -> None:
    df = sweep_frame(rows)
    formatted = df.apply(lambda col: col.map(format_value))
    _write_frame(formatted, path, header=True)


def write_loss_history(history: List[float], path: PathLike) -> None:
    df = pd.DataFrame({"epoch": range(len(history)), "loss": [format_value(float(v)) for v in history]})
    _write_frame(df, path, header=True)
