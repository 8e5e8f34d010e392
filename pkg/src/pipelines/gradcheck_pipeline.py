# gradcheck_pipeline.py
"""
Compare tape gradients of the pose loss with central finite differences.

Checked coordinates: every per-point weight of both clouds (weights as
tape leaves) and every model parameter, or a seeded sample of them (parameters as
the leaf, weights predicted and soft-rejected on the tape).
"""

import logging
from typing import Callable, List

import numpy as np
from numpy.typing import NDArray

from ..tools import autodiff_tools as ad
from ..tools.covariance_tools import estimate_covariances, plane_regularize
from ..tools.geometry_tools import PointCloud, RigidTransform
from ..tools.registration_tools import WgicpProblem, pose_error, pose_gradients, unroll_wgicp
from ..tools.synthetic_tools import make_outlier_pair
from ..tools.weight_tools import (
    N_PARAMS,
    TrainingPair,
    WeightModel,
    pair_loss,
    pair_loss_and_gradient,
    predict_weights,
    soft_reject,
)
from ..utils.consts import DEFAULT_COV_NEIGHBORS, DEFAULT_PLANE_EPSILON, GRADCHECK_REL_FLOOR
from ..utils.schemas import CovarianceParams, GateMode, GradcheckConfig, GradcheckReport, LmParams, TrainConfig

logger = logging.getLogger(__name__)

# Adjoint rule perturbed by the negative control
_CORRUPTED_OP = "mul"


def _with_covariances(cloud: PointCloud) -> PointCloud:
    n = len(cloud)
    if n >= 3:
        return estimate_covariances(cloud, CovarianceParams(k_neighbors=min(DEFAULT_COV_NEIGHBORS, n)))
    flat = plane_regularize(np.zeros((n, 3, 3)), DEFAULT_PLANE_EPSILON)
    return cloud.with_covariances(flat)


def relative_errors(analytic: NDArray[np.float64], numeric: NDArray[np.float64]) -> NDArray[np.float64]:
    """|a − b| / max(|a|, |b|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRADCHECK_REL_FLOOR)
    return np.abs(analytic - numeric) / scale


def central_differences(f: Callable[[NDArray[np.float64]], float], x: NDArray[np.float64], coords, step: float):
    out = np.zeros(len(coords))
    for i, c in enumerate(coords):
        plus, minus = x.copy(), x.copy()
        plus[c] += step
        minus[c] -= step
        out[i] = (f(plus) - f(minus)) / (2.0 * step)
    return out


def parameter_coords(param_samples: int, rng: np.random.Generator) -> NDArray[np.intp]:
    """All parameter indices for 0, else a sorted seeded sample of `param_samples`."""
    if param_samples == 0 or param_samples >= N_PARAMS:
        return np.arange(N_PARAMS)
    return np.sort(rng.choice(N_PARAMS, size=param_samples, replace=False))


def _corrupting_hook(op: str, g: NDArray[np.float64]) -> NDArray[np.float64]:
    return g * 1.5 if op == _CORRUPTED_OP else g


def run_gradcheck(config: GradcheckConfig) -> GradcheckReport:
    rng = np.random.default_rng(config.seed)
    pair = make_outlier_pair(rng, n_points=config.points)
    source, target = _with_covariances(pair.source), _with_covariances(pair.target)
    k_d = min(config.k_d, len(target))
    lm = LmParams(gate=GateMode.SMOOTH_GATED, unroll_iterations=config.iterations)
    problem = WgicpProblem(source=source, target=target, k_d=k_d, lm=lm)
    model = WeightModel.init(config.seed)
    hook = _corrupting_hook if config.corrupt_adjoint else None
    n_src = len(source)

    # Per-point weights as leaves
    ws0 = np.asarray(soft_reject(predict_weights(model, source)))
    wt0 = np.asarray(soft_reject(predict_weights(model, target)))
    weighted = problem.model_copy(
        update={"source": source.with_weights(ws0), "target": target.with_weights(wt0)}
    )
    grads = pose_gradients(weighted, pair.gt, tape=ad.Tape(adjoint_hook=hook))
    analytic_w = np.concatenate([grads.source, grads.target])

    def loss_at_weights(w: NDArray[np.float64]) -> float:
        solution = unroll_wgicp(problem, w[:n_src], w[n_src:])
        return float(pose_error(solution.rotation, solution.translation, pair.gt))

    w0 = np.concatenate([ws0, wt0])
    numeric_w = central_differences(loss_at_weights, w0, range(len(w0)), config.step)
    errors: List[NDArray[np.float64]] = [relative_errors(analytic_w, numeric_w)]

    # Model parameters as the leaf
    train_config = TrainConfig(k_d=k_d, lm=lm, max_points=None)
    training_pair = TrainingPair(previous=target, current=source, gt=pair.gt)
    loss, analytic_p = pair_loss_and_gradient(model, training_pair, train_config, tape=ad.Tape(adjoint_hook=hook))
    coords = parameter_coords(config.param_samples, rng)

    def loss_at_params(theta: NDArray[np.float64]) -> float:
        return float(pair_loss(theta, training_pair, train_config))

    numeric_p = central_differences(loss_at_params, np.array(model.params), coords, config.step)
    errors.append(relative_errors(analytic_p[coords], numeric_p))

    all_errors = np.concatenate(errors)
    max_err = float(np.max(all_errors)) if all_errors.size else 0.0
    report = GradcheckReport(
        max_rel_error=max_err,
        median_rel_error=float(np.median(all_errors)) if all_errors.size else 0.0,
        n_weights=len(analytic_w),
        n_params_checked=len(coords),
        loss=loss,
        passed=max_err < config.tolerance,
    )
    logger.info(
        "gradcheck points=%d iterations=%d max_rel_error=%.3e passed=%s",
        config.points,
        config.iterations,
        report.max_rel_error,
        report.passed,
    )
    return report
