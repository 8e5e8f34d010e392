"""Scan registration: point-to-point ICP, GICP and weighted GICP.

Residuals and normal equations are written once against the autodiff
primitives, so the same code is the fast solver (plain numpy operands)
and the differentiable solver (tape `Var` operands).

For a source point a_i moved to p_i = R a_i + t and its K_d target
neighbors b_j, the weighted objective is

    Σ_i w_i Σ_j w̄_ij · d_ijᵀ (C_j^B + R C_i^A Rᵀ)⁻¹ d_ij,    d_ij = b_j − p_i

with w̄_ij the soft-KNN weights of the target neighbors. K_d = 1 and unit
weights reduce it to GICP; identity information matrices give ICP.

Increments are left perturbations: T ← exp(δ)·T, δ = [rot; trans].
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from ..utils.consts import DEFAULT_KD, DEFAULT_KNN_TEMPERATURE, DIVERGENCE_LIMIT, EPS_W, POSE_LOSS_FLOOR
from ..utils.errors import Diverged, EmptyCloud, InvalidCloud, SingularMatrix, SingularNormalEquations
from ..utils.schemas import GateMode, LmParams, SolverMode
from . import autodiff_tools as ad
from .geometry_tools import PointCloud, RigidTransform, Twist, exp_se3, skew
from .knn_tools import KdIndex

logger = logging.getLogger(__name__)

_EYE6 = np.eye(6)


# =============================================================================
# PROBLEM / RESULT TYPES
# =============================================================================


class WgicpProblem(BaseModel):
    """Source A and target B with covariances and optional weights (default all ones)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    source: PointCloud
    target: PointCloud
    k_d: int = Field(default=DEFAULT_KD, ge=1)
    knn_temperature: float = Field(default=DEFAULT_KNN_TEMPERATURE, gt=0.0)
    eps_w: float = Field(default=EPS_W, gt=0.0)
    lm: LmParams = Field(default_factory=LmParams)

    _index: Optional[KdIndex] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def check_clouds(self) -> "WgicpProblem":
        for name, cloud in (("source", self.source), ("target", self.target)):
            if cloud.is_empty:
                raise EmptyCloud(f"{name} cloud is empty")
            if cloud.covariances is None:
                raise InvalidCloud(
                    f"{name} cloud has no covariances",
                    hint="Run estimate_covariances on both clouds first",
                )
        return self

    @property
    def target_index(self) -> KdIndex:
        if self._index is None:
            self._index = KdIndex(self.target.points)
        return self._index


class RegistrationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    transform: RigidTransform
    final_objective: float
    iterations: int = Field(ge=0)
    converged: bool
    objective_trace: List[float]
    lambda_trace: List[float] = Field(default_factory=list)
    gate_trace: List[float] = Field(default_factory=list)
    mode: SolverMode = SolverMode.FAST


@dataclass(frozen=True)
class UnrolledSolution:
    """Differentiable solve: pose entries as tape values plus the numeric summary."""

    rotation: "ad.Operand"
    translation: "ad.Operand"
    result: RegistrationResult


@dataclass(frozen=True)
class WeightGradients:
    loss: float
    source: NDArray[np.float64]
    target: NDArray[np.float64]
    result: RegistrationResult


# =============================================================================
# SHARED OBJECTIVE / NORMAL EQUATIONS
# =============================================================================


class _Evaluator:
    """Objective terms over fixed clouds; operands may be arrays or tape Vars."""

    def __init__(
        self,
        source_points: NDArray[np.float64],
        source_cov: Optional[NDArray[np.float64]],
        target_points: NDArray[np.float64],
        target_cov: Optional[NDArray[np.float64]],
        index: KdIndex,
        k: int,
        temperature: float = DEFAULT_KNN_TEMPERATURE,
        eps_w: float = EPS_W,
    ) -> None:
        self.src = source_points
        self.src_cov = source_cov
        self.tgt = target_points
        self.tgt_cov = target_cov
        self.index = index
        self.k = min(k, len(target_points))
        self.temperature = temperature
        self.eps_w = eps_w

    @property
    def n(self) -> int:
        return len(self.src)

    def match(self, R, t) -> NDArray[np.intp]:
        moved = ad.value(R) @ self.src.T
        moved = moved.T + ad.value(t)
        _, nb = self.index.query(moved, self.k)
        return nb

    def _knn_weights(self, d, nb, target_weights):
        if self.k == 1:
            return np.ones(nb.shape)
        dist = ad.norm2(d)
        if target_weights is not None:
            dist = ad.div(dist, ad.maximum(ad.take(target_weights, nb), self.eps_w))
        s = ad.neg(ad.div(dist, self.temperature))
        s = ad.sub(s, np.max(ad.value(s), axis=1, keepdims=True))
        e = ad.exp(s)
        return ad.div(e, ad.sum(e, axis=1, keepdims=True))

    def terms(self, R, t, nb, source_weights=None, target_weights=None):
        """Returns (objective, p, d, W, Wd, c); W is None for the point-to-point metric."""
        n, k = nb.shape
        p = ad.add(ad.matvec3(R, self.src), t)
        d = ad.sub(self.tgt[nb], ad.reshape(p, (n, 1, 3)))

        W = None
        Wd = d
        if self.src_cov is not None:
            rotated = ad.matmul(ad.matmul(R, self.src_cov), ad.transpose(R))
            M = ad.add(self.tgt_cov[nb], ad.reshape(rotated, (n, 1, 3, 3)))
            W = ad.inverse3(M)
            Wd = ad.matvec3(W, d)

        c = self._knn_weights(d, nb, target_weights)
        if source_weights is not None:
            c = ad.mul(ad.reshape(source_weights, (n, 1)), c)
        objective = ad.sum(ad.mul(c, ad.dot(d, Wd)))
        return objective, p, d, W, Wd, c

    def objective(self, R, t, nb, source_weights=None, target_weights=None):
        return self.terms(R, t, nb, source_weights, target_weights)[0]

    def linearize(self, R, t, nb, source_weights=None, target_weights=None):
        """Objective, Gauss-Newton H (6×6) and g with δ = H⁻¹ g the undamped step."""
        objective, p, _, W, Wd, c = self.terms(R, t, nb, source_weights, target_weights)
        n, k = nb.shape
        info = np.eye(3) if W is None else W
        S = ad.sum(ad.mul(ad.reshape(c, (n, k, 1, 1)), info), axis=1)
        u = ad.sum(ad.mul(ad.reshape(c, (n, k, 1)), Wd), axis=1)

        P = skew(p)
        PS = ad.matmul(P, S)
        H_rr = ad.neg(ad.sum(ad.matmul(PS, P), axis=0))
        H_rt = ad.sum(PS, axis=0)
        H_tr = ad.neg(ad.sum(ad.matmul(S, P), axis=0))
        H_tt = ad.sum(S, axis=0)
        H = ad.concat(
            [ad.concat([H_rr, H_rt], axis=1), ad.concat([H_tr, H_tt], axis=1)], axis=0
        )
        g = ad.concat([ad.sum(ad.matvec3(P, u), axis=0), ad.sum(u, axis=0)], axis=0)
        return objective, H, g


def _damped_step(H, g, lam):
    """Marquardt step: (H + λ·diag(H)) δ = g."""
    A = ad.add(H, ad.mul(lam, ad.mul(H, _EYE6)))
    try:
        return ad.solve(A, g)
    except SingularMatrix as e:
        raise SingularNormalEquations(
            f"damped normal equations are singular (lambda={float(ad.value(lam)):.3e})",
            hint="Degenerate geometry: too few or coplanar points",
        ) from e


def _increment(delta, R, t):
    """exp(δ)·(R, t)."""
    Rd, td = exp_se3(delta)
    return ad.matmul(Rd, R), ad.add(ad.matvec3(Rd, t), td)


def _check_objective(value: float, step: int) -> None:
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise Diverged(
            f"objective {value:.3e} exceeds {DIVERGENCE_LIMIT:.0e}", step=step, context={"objective": value}
        )


def _evaluator(problem: WgicpProblem, k: Optional[int] = None) -> _Evaluator:
    return _Evaluator(
        problem.source.points,
        problem.source.covariances,
        problem.target.points,
        problem.target.covariances,
        problem.target_index,
        problem.k_d if k is None else k,
        problem.knn_temperature,
        problem.eps_w,
    )


def _start(initial: Optional[RigidTransform]) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    T = initial or RigidTransform.identity()
    return np.array(T.rotation), np.array(T.translation)


# =============================================================================
# OBJECTIVES / SINGLE STEP
# =============================================================================


def gicp_objective(problem: WgicpProblem, T: RigidTransform) -> float:
    """Σ dᵢᵀ (C_i^B + R C_i^A Rᵀ)⁻¹ dᵢ over single-nearest matches found at T."""
    ev = _evaluator(problem, k=1)
    nb = ev.match(T.rotation, T.translation)
    return float(ev.objective(T.rotation, T.translation, nb))


def wgicp_objective(problem: WgicpProblem, T: RigidTransform, source_weights=None, target_weights=None):
    """Weighted soft-KNN objective at T.

    Weights default to the clouds' own (all ones when absent). Passing tape
    Vars as weights returns a Var.
    """
    ev = _evaluator(problem)
    nb = ev.match(T.rotation, T.translation)
    ws = problem.source.weights if source_weights is None else source_weights
    wt = problem.target.weights if target_weights is None else target_weights
    out = ev.objective(T.rotation, T.translation, nb, ws, wt)
    return out if ad.is_var(out) else float(out)


def lm_step(problem: WgicpProblem, T: RigidTransform, lam: float) -> Tuple[Twist, float]:
    """Damped step at T and the objective after applying it (same correspondences)."""
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    ev = _evaluator(problem)
    ws, wt = problem.source.weights, problem.target.weights
    nb = ev.match(T.rotation, T.translation)
    _, H, g = ev.linearize(T.rotation, T.translation, nb, ws, wt)
    delta = _damped_step(H, g, lam)
    R_new, t_new = _increment(delta, T.rotation, T.translation)
    lookahead = float(ev.objective(R_new, t_new, nb, ws, wt))
    return Twist.from_vector(delta), lookahead


def smooth_gate(current, lookahead, scale: float = 1.0, normalizer: float = 1.0):
    """sigmoid((current − lookahead) / normalizer / scale): near 1 for a good step."""
    gate = ad.sigmoid(ad.div(ad.sub(current, lookahead), normalizer * scale))
    return gate if ad.is_var(gate) else float(gate)


def step_gate(current, lookahead, lm: LmParams, normalizer: float = 1.0):
    """Gate used for both the update and the damping; `lm.reversed_gate` swaps its sign convention."""
    if lm.reversed_gate:
        return smooth_gate(lookahead, current, lm.gate_scale, normalizer)
    return smooth_gate(current, lookahead, lm.gate_scale, normalizer)


def gated_lambda(gate, lm: LmParams):
    """λ_min + (λ_max − λ_min)·(1 − gate)."""
    lam = ad.add(lm.lambda_min, ad.mul(lm.lambda_max - lm.lambda_min, ad.sub(1.0, gate)))
    return lam if ad.is_var(lam) else float(lam)


# =============================================================================
# FAST SOLVER (HardLm)
# =============================================================================


def _solve_hard_lm(
    ev: _Evaluator, lm: LmParams, initial: Optional[RigidTransform], source_weights=None, target_weights=None
) -> RegistrationResult:
    R, t = _start(initial)
    lam = lm.lambda0
    nb = ev.match(R, t)
    current = float(ev.objective(R, t, nb, source_weights, target_weights))
    _check_objective(current, 0)

    trace, lambdas = [current], [lam]
    converged = False
    iterations = 0
    for step in range(lm.max_iterations):
        _, H, g = ev.linearize(R, t, nb, source_weights, target_weights)
        delta = _damped_step(H, g, lam)
        if float(np.linalg.norm(delta)) < lm.update_tol:
            converged = True
            break

        R_new, t_new = _increment(delta, R, t)
        lookahead = float(ev.objective(R_new, t_new, nb, source_weights, target_weights))
        if lookahead < current:
            R, t, current = R_new, t_new, lookahead
            _check_objective(current, step + 1)
            lam = max(lam / 10.0, lm.lambda_min)
            rematched = ev.match(R, t)
            rematched_objective = float(ev.objective(R, t, rematched, source_weights, target_weights))
            if rematched_objective <= current:
                nb, current = rematched, rematched_objective
        elif lam >= lm.lambda_max:
            logger.debug("lm step rejected at lambda_max step=%d objective=%.6g", step, current)
            break
        else:
            lam = min(lam * 10.0, lm.lambda_max)

        iterations += 1
        trace.append(current)
        lambdas.append(lam)
        logger.debug("lm step=%d objective=%.9g lambda=%.1e", step, current, lam)

    if not converged:
        logger.debug("lm stopped without convergence iterations=%d objective=%.6g", iterations, current)
    return RegistrationResult(
        transform=RigidTransform(R, t, check=False),
        final_objective=current,
        iterations=iterations,
        converged=converged,
        objective_trace=trace,
        lambda_trace=lambdas,
        mode=SolverMode.FAST,
    )


def align_icp(
    source: PointCloud, target: PointCloud, lm: Optional[LmParams] = None, initial: Optional[RigidTransform] = None
) -> RegistrationResult:
    """Point-to-point ICP: Σ dᵢᵀdᵢ over nearest neighbors, re-matched each iteration."""
    if source.is_empty or target.is_empty:
        raise EmptyCloud("ICP needs two nonempty clouds")
    ev = _Evaluator(source.points, None, target.points, None, KdIndex(target.points), k=1)
    return _solve_hard_lm(ev, lm or LmParams(), initial)


def align_gicp(
    source: PointCloud, target: PointCloud, lm: Optional[LmParams] = None, initial: Optional[RigidTransform] = None
) -> RegistrationResult:
    """Plain GICP: single-nearest matches, unit weights."""
    problem = WgicpProblem(
        source=source.without_weights(), target=target.without_weights(), k_d=1, lm=lm or LmParams()
    )
    return _solve_hard_lm(_evaluator(problem), problem.lm, initial)


# =============================================================================
# DIFFERENTIABLE SOLVER (SmoothGated, unrolled)
# =============================================================================


def unroll_wgicp(
    problem: WgicpProblem,
    source_weights=None,
    target_weights=None,
    initial: Optional[RigidTransform] = None,
) -> UnrolledSolution:
    """
    Fixed-count gated LM recorded on the weights' tape.

    Every iteration re-matches at the current pose, takes a damped step,
    and blends it in by the smooth gate of the mean-normalized objective
    improvement. Correspondence indices are constants; everything else is
    differentiable with respect to the weights.
    """
    lm = problem.lm
    ev = _evaluator(problem)
    ws = problem.source.weights if source_weights is None else source_weights
    wt = problem.target.weights if target_weights is None else target_weights
    R, t = _start(initial)
    lam = lm.lambda0

    trace: List[float] = []
    lambdas: List[float] = [lm.lambda0]
    gates: List[float] = []
    step_norm = math.inf
    for step in range(lm.unroll_iterations):
        nb = ev.match(R, t)
        current, H, g = ev.linearize(R, t, nb, ws, wt)
        _check_objective(float(ad.value(current)), step)
        trace.append(float(ad.value(current)))

        delta = _damped_step(H, g, lam)
        step_norm = float(np.linalg.norm(ad.value(delta)))
        R_look, t_look = _increment(delta, R, t)
        lookahead = ev.objective(R_look, t_look, nb, ws, wt)

        gate = step_gate(current, lookahead, lm, normalizer=ev.n)
        R, t = _increment(ad.mul(gate, delta), R, t)
        lam = gated_lambda(gate, lm)

        gates.append(float(ad.value(gate)))
        lambdas.append(float(ad.value(lam)))
        logger.debug(
            "unrolled step=%d objective=%.9g gate=%.4f lambda=%.3e", step, trace[-1], gates[-1], lambdas[-1]
        )

    nb = ev.match(R, t)
    final = float(ad.value(ev.objective(R, t, nb, ws, wt)))
    _check_objective(final, lm.unroll_iterations)
    trace.append(final)
    result = RegistrationResult(
        transform=RigidTransform(ad.value(R), ad.value(t), check=False),
        final_objective=final,
        iterations=lm.unroll_iterations,
        converged=step_norm < lm.update_tol,
        objective_trace=trace,
        lambda_trace=lambdas,
        gate_trace=gates,
        mode=SolverMode.DIFFERENTIABLE,
    )
    return UnrolledSolution(rotation=R, translation=t, result=result)


def align_wgicp(
    problem: WgicpProblem,
    mode: SolverMode = SolverMode.FAST,
    initial: Optional[RigidTransform] = None,
) -> RegistrationResult:
    """
    Weighted GICP with soft K_d correspondences.

    FAST runs HardLm with early exit; DIFFERENTIABLE runs the unrolled
    SmoothGated solver. With unit weights and K_d > 1 this is soft-KNN
    GICP; with K_d = 1 it is plain GICP.
    """
    if mode == SolverMode.DIFFERENTIABLE:
        return unroll_wgicp(problem, initial=initial).result
    lm = problem.lm
    if lm.gate != GateMode.HARD_LM:
        lm = lm.model_copy(update={"gate": GateMode.HARD_LM})
    return _solve_hard_lm(
        _evaluator(problem), lm, initial, problem.source.weights, problem.target.weights
    )


# =============================================================================
# GRADIENTS
# =============================================================================


def pose_error(R, t, gt: RigidTransform):
    """‖[R t] − [R_gt t_gt]‖_F with a tiny floor under the root (differentiable at 0)."""
    dR = ad.sub(R, gt.rotation)
    dt = ad.sub(t, gt.translation)
    sq = ad.add(ad.sum(ad.mul(dR, dR)), ad.sum(ad.mul(dt, dt)))
    return ad.sqrt(ad.maximum(sq, POSE_LOSS_FLOOR))


def pose_gradients(
    problem: WgicpProblem,
    gt: RigidTransform,
    initial: Optional[RigidTransform] = None,
    tape: Optional[ad.Tape] = None,
) -> WeightGradients:
    """∂‖T_est − T_gt‖_F / ∂w for every source and target point through the unrolled solver."""
    tape = tape or ad.Tape()
    ws = tape.variable(problem.source.weights_or_ones())
    wt = tape.variable(problem.target.weights_or_ones())
    solution = unroll_wgicp(problem, ws, wt, initial)
    loss = pose_error(solution.rotation, solution.translation, gt)
    if not ad.is_var(loss):
        zero_s, zero_t = np.zeros(len(problem.source)), np.zeros(len(problem.target))
        return WeightGradients(float(loss), zero_s, zero_t, solution.result)
    adjoints = tape.backward(loss)
    return WeightGradients(
        loss=float(ad.value(loss)),
        source=adjoints[ws],
        target=adjoints[wt],
        result=solution.result,
    )
