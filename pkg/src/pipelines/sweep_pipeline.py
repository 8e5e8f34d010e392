# sweep_pipeline.py
"""Rejection-ratio sweep: one odometry run per (voxel size, rejection ratio)."""

import logging
from typing import List, Optional

from pydantic import ValidationError

from ..tools.plot_tools import plot_rejection_sweep
from ..tools.report_tools import write_sweep
from ..utils.cloud_cache import cache_capacity
from ..utils.consts import ReportKeys, TimingKeys
from ..utils.errors import InvalidConfig
from ..utils.schemas import OdometryConfig, SweepConfig, SweepRow
from .odometry_pipeline import OdometryOutcome, evaluate_sequence, load_model, load_sequence

logger = logging.getLogger(__name__)


def _run_config(base: OdometryConfig, voxel_size: float, rejection: float) -> OdometryConfig:
    values = base.model_dump()
    values.update(voxel_size=voxel_size, rejection_ratio=rejection)
    try:
        return OdometryConfig(**values)
    except ValidationError as e:
        raise InvalidConfig(f"sweep voxel={voxel_size} rejection={rejection}: {e}") from e


def _sweep_row(outcome: OdometryOutcome, run_config: OdometryConfig) -> SweepRow:
    row = SweepRow(
        voxel_size=run_config.voxel_size,
        rejection=run_config.rejection_ratio,
        surviving_pct=float(outcome.metrics[ReportKeys.SURVIVING_PCT.value]),
        t_rel=float(outcome.metrics[ReportKeys.T_REL.value]),
        r_rel=float(outcome.metrics[ReportKeys.R_REL.value]),
        alignment_ms=float(outcome.timing[TimingKeys.ALIGNMENT.value]),
        ms_per_iteration=outcome.run.ms_per_iteration(),
    )
    logger.info(
        "sweep voxel=%.3f rejection=%.2f surviving_pct=%.2f alignment_ms=%.2f ms_per_iteration=%.3f",
        row.voxel_size,
        row.rejection,
        row.surviving_pct,
        row.alignment_ms,
        row.ms_per_iteration,
    )
    return row


def run_sweep(
    data_dir: str,
    config: SweepConfig,
    gt_path: Optional[str] = None,
    out: Optional[str] = None,
    plot_dir: Optional[str] = None,
) -> List[SweepRow]:
    """
    Sweep rejection ratios for every voxel size.

    Preprocessed frames are cached for one voxel size at a time, so only
    the first rejection ratio of each voxel size pays for preprocessing.
    """
    runs = [[_run_config(config.odometry, v, r) for r in config.rejections] for v in config.voxel_sizes]
    data = load_sequence(data_dir, gt_path, config.odometry.max_frames)
    model = load_model(config.odometry)

    rows: List[SweepRow] = []
    for voxel_runs in runs:
        with cache_capacity(len(data.scan_paths)):
            for run_config in voxel_runs:
                rows.append(_sweep_row(evaluate_sequence(data, run_config, model), run_config))

    if out:
        write_sweep(rows, out)
    if plot_dir:
        plot_rejection_sweep(rows, plot_dir)
    return rows
