"""
Tests for scan registration
ICP / GICP / weighted GICP solvers, the damped step, the smooth gate and
weight gradients through the unrolled solver
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path so imports work
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.tools.covariance_tools import estimate_covariances
from src.tools.geometry_tools import PointCloud, RigidTransform, rotation_angle
from src.tools.registration_tools import (
    WgicpProblem,
    align_gicp,
    align_icp,
    align_wgicp,
    gated_lambda,
    gicp_objective,
    lm_step,
    pose_error,
    pose_gradients,
    smooth_gate,
    step_gate,
    unroll_wgicp,
    wgicp_objective,
)
from src.tools.synthetic_tools import make_outlier_pair, make_pair, random_transform, transform_from
from src.utils.errors import Diverged, EmptyCloud, InvalidCloud, SingularNormalEquations
from src.utils.schemas import CovarianceParams, GateMode, LmParams, SolverMode

TETRAHEDRON = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])


def assert_recovered(result, gt, trans_tol=1e-3, rot_tol_deg=0.1):
    err = gt.inverse() @ result.transform
    assert np.linalg.norm(err.translation) < trans_tol
    assert math.degrees(rotation_angle(err.rotation)) < rot_tol_deg


def identity_cov(n):
    return np.tile(np.eye(3), (n, 1, 1))


class TestAlign:
    """Fast solvers end to end"""

    @pytest.mark.smoke
    def test_icp_identical_clouds(self, scene):
        result = align_icp(scene, scene)
        assert result.transform.almost_equal(RigidTransform.identity(), tol=1e-12)
        assert result.final_objective == 0.0
        assert result.converged
        assert result.iterations == 0

    def test_gicp_recovers_known_motion(self, motion_pair):
        source, target, gt = motion_pair
        result = align_gicp(source, target)
        assert result.converged
        assert_recovered(result, gt)

    def test_icp_recovers_small_motion(self, rng):
        gt = transform_from(1.0, axis=(0.0, 0.0, 1.0), translation=(0.02, -0.01, 0.01))
        source, target = make_pair(rng, gt, n_points=800)
        assert_recovered(align_icp(source, target), gt)

    def test_wgicp_k1_matches_gicp(self, motion_pair):
        source, target, _ = motion_pair
        problem = WgicpProblem(source=source, target=target, k_d=1)
        a = align_wgicp(problem)
        b = align_gicp(source, target)
        np.testing.assert_array_equal(a.transform.matrix, b.transform.matrix)
        assert a.objective_trace == b.objective_trace

    def test_trace_nonincreasing(self, motion_pair):
        source, target, _ = motion_pair
        result = align_gicp(source, target)
        trace = result.objective_trace
        assert len(trace) == result.iterations + 1
        assert len(result.lambda_trace) == len(trace)
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert trace[-1] == result.final_objective

    def test_soft_knn_trace_nonincreasing(self, motion_pair):
        source, target, _ = motion_pair
        result = align_wgicp(WgicpProblem(source=source, target=target, k_d=4))
        trace = result.objective_trace
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert result.mode == SolverMode.FAST

    def test_initial_guess_at_truth(self, motion_pair):
        source, target, gt = motion_pair
        result = align_gicp(source, target, initial=gt)
        assert result.final_objective < 1e-12
        assert_recovered(result, gt, trans_tol=1e-9, rot_tol_deg=1e-7)

    def test_zero_weight_points_are_ignored(self, rng, motion_pair):
        source, target, gt = motion_pair
        junk = estimate_covariances(PointCloud(rng.uniform(-2.0, 2.0, size=(50, 3))))
        contaminated = PointCloud.concatenate([source, junk]).with_weights(
            np.concatenate([np.ones(len(source)), np.zeros(len(junk))])
        )
        clean = align_wgicp(WgicpProblem(source=source, target=target, k_d=1))
        dirty = align_wgicp(WgicpProblem(source=contaminated, target=target, k_d=1))
        np.testing.assert_allclose(dirty.transform.matrix, clean.transform.matrix, atol=1e-6)
        assert_recovered(dirty, gt)

    def test_collinear_points_are_singular(self):
        line = PointCloud(np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)]))
        with pytest.raises(SingularNormalEquations):
            align_icp(line, line)

    def test_far_apart_clouds_diverge(self, scene):
        far = PointCloud(scene.points + 1e7)
        with pytest.raises(Diverged) as info:
            align_icp(scene, far)
        assert info.value.step == 0

    def test_empty_cloud(self, scene):
        with pytest.raises(EmptyCloud):
            align_icp(PointCloud.empty(), scene)


class TestProblem:
    """Problem validation and objectives"""

    def test_requires_covariances(self, scene):
        with pytest.raises(InvalidCloud):
            WgicpProblem(source=scene, target=scene)

    def test_requires_points(self):
        empty = PointCloud(np.zeros((0, 3)), covariances=np.zeros((0, 3, 3)))
        cloud = PointCloud(np.zeros((1, 3)), covariances=identity_cov(1))
        with pytest.raises(EmptyCloud):
            WgicpProblem(source=empty, target=cloud)

    @pytest.mark.smoke
    def test_gicp_objective_single_point(self):
        half = np.eye(3)[None] * 0.5
        problem = WgicpProblem(
            source=PointCloud([[0.0, 0.0, 0.0]], covariances=half),
            target=PointCloud([[1.0, 0.0, 0.0]], covariances=half),
        )
        assert gicp_objective(problem, RigidTransform.identity()) == pytest.approx(1.0, abs=1e-15)
        shifted = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
        assert gicp_objective(problem, shifted) == 0.0

    def test_wgicp_objective_reduces_to_gicp(self, rng, motion_pair):
        source, target, _ = motion_pair
        problem = WgicpProblem(source=source, target=target, k_d=1)
        for _ in range(5):
            T = random_transform(rng)
            assert wgicp_objective(problem, T) == gicp_objective(problem, T)

    def test_reduction_to_gicp_on_random_problems(self, rng):
        for _ in range(50):
            gt = random_transform(rng)
            source, target = make_pair(rng, gt, n_points=150, noise=0.01)
            source, target = estimate_covariances(source), estimate_covariances(target)
            problem = WgicpProblem(source=source, target=target, k_d=1)
            T = random_transform(rng)
            assert wgicp_objective(problem, T) == pytest.approx(gicp_objective(problem, T), rel=1e-12, abs=1e-12)
            weighted = align_wgicp(problem)
            plain = align_gicp(source, target)
            np.testing.assert_allclose(weighted.transform.matrix, plain.transform.matrix, atol=1e-9)

    def test_objective_invariant_under_rigid_motion(self, rng, motion_pair):
        source, target, _ = motion_pair
        M = random_transform(rng, max_angle_deg=90.0, max_translation=5.0)
        problem = WgicpProblem(source=source, target=target, k_d=4)
        moved = WgicpProblem(source=source.transformed(M), target=target.transformed(M), k_d=4)
        for _ in range(5):
            T = random_transform(rng)
            expected = wgicp_objective(problem, T)
            assert wgicp_objective(moved, M @ T @ M.inverse()) == pytest.approx(expected, rel=1e-9)

    def test_optimal_objective_invariant_under_rigid_motion(self, rng, known_motion):
        source, target = make_pair(rng, known_motion, n_points=500, noise=0.01)
        source, target = estimate_covariances(source), estimate_covariances(target)
        M = random_transform(rng, max_angle_deg=90.0, max_translation=5.0)
        a = align_wgicp(WgicpProblem(source=source, target=target, k_d=4))
        b = align_wgicp(WgicpProblem(source=source.transformed(M), target=target.transformed(M), k_d=4))
        assert b.final_objective == pytest.approx(a.final_objective, rel=1e-6)
        assert b.transform.almost_equal(M @ a.transform @ M.inverse(), tol=1e-4)

    def test_unit_weights_change_nothing(self, motion_pair):
        source, target, gt = motion_pair
        problem = WgicpProblem(source=source, target=target, k_d=4)
        weighted = WgicpProblem(
            source=source.with_weights(np.ones(len(source))),
            target=target.with_weights(np.ones(len(target))),
            k_d=4,
        )
        assert wgicp_objective(weighted, gt) == pytest.approx(wgicp_objective(problem, gt), rel=1e-14)


class TestLmStep:
    """Single damped step"""

    @pytest.mark.smoke
    def test_zero_residual(self, scene):
        cloud = estimate_covariances(scene)
        problem = WgicpProblem(source=cloud, target=cloud, k_d=1)
        delta, lookahead = lm_step(problem, RigidTransform.identity(), 1e-4)
        assert delta.norm() == 0.0
        assert lookahead == 0.0

    def test_translation_step_is_exact(self):
        offset = np.array([0.05, -0.02, 0.03])
        problem = WgicpProblem(
            source=PointCloud(TETRAHEDRON, covariances=identity_cov(4)),
            target=PointCloud(TETRAHEDRON + offset, covariances=identity_cov(4)),
            k_d=1,
        )
        delta, lookahead = lm_step(problem, RigidTransform.identity(), 1e-9)
        np.testing.assert_allclose(delta.trans_vec, offset, atol=1e-9)
        np.testing.assert_allclose(delta.rot_vec, np.zeros(3), atol=1e-12)
        assert lookahead < 1e-15

    def test_large_damping_shrinks_step(self, motion_pair):
        source, target, _ = motion_pair
        problem = WgicpProblem(source=source, target=target, k_d=1)
        small, _ = lm_step(problem, RigidTransform.identity(), 1e-8)
        large, _ = lm_step(problem, RigidTransform.identity(), 1e8)
        assert small.norm() > 0.0
        assert large.norm() < 1e-5 * small.norm()

    def test_lambda_must_be_positive(self, motion_pair):
        source, target, _ = motion_pair
        with pytest.raises(ValueError):
            lm_step(WgicpProblem(source=source, target=target), RigidTransform.identity(), 0.0)


class TestGate:
    """Smooth gate and gated damping"""

    @pytest.mark.smoke
    def test_equal_objectives_give_half(self):
        assert smooth_gate(3.0, 3.0) == 0.5

    def test_normalized_improvement(self):
        assert smooth_gate(10.0, 0.0, scale=1.0, normalizer=10.0) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))
        assert smooth_gate(0.0, 10.0, scale=2.0, normalizer=5.0) == pytest.approx(1.0 / (1.0 + math.exp(1.0)))

    def test_gated_lambda_range(self):
        lm = LmParams()
        assert gated_lambda(1.0, lm) == lm.lambda_min
        assert gated_lambda(0.0, lm) == pytest.approx(lm.lambda_max)
        assert gated_lambda(0.5, lm) == pytest.approx(0.5 * (lm.lambda_min + lm.lambda_max))

    def test_lambda_order_validated(self):
        with pytest.raises(ValueError):
            LmParams(lambda_min=1.0, lambda0=0.1, lambda_max=10.0)

    def test_gate_strictly_monotone(self):
        diffs = np.linspace(-6.0, 6.0, 121)
        gates = [smooth_gate(d, 0.0) for d in diffs]
        assert all(b > a for a, b in zip(gates, gates[1:]))
        lookaheads = [smooth_gate(0.0, d, scale=0.5, normalizer=3.0) for d in diffs]
        assert all(b < a for a, b in zip(lookaheads, lookaheads[1:]))
        assert smooth_gate(0.0, 0.0) == 0.5

    def test_improving_step_opens_gate_and_lowers_damping(self):
        lm = LmParams()
        mid = 0.5 * (lm.lambda_min + lm.lambda_max)
        gate = step_gate(10.0, 0.0, lm)
        assert gate > 0.5
        assert gated_lambda(gate, lm) < mid
        worse = step_gate(0.0, 10.0, lm)
        assert worse < 0.5
        assert gated_lambda(worse, lm) > mid

    def test_reversed_gate_flips_update_and_damping(self):
        lm = LmParams(reversed_gate=True)
        mid = 0.5 * (lm.lambda_min + lm.lambda_max)
        gate = step_gate(10.0, 0.0, lm)
        assert gate < 0.5
        assert gated_lambda(gate, lm) > mid
        worse = step_gate(0.0, 10.0, lm)
        assert worse > 0.5
        assert gated_lambda(worse, lm) < mid
        assert gate + step_gate(10.0, 0.0, LmParams()) == pytest.approx(1.0, abs=1e-15)


class TestUnrolled:
    """Differentiable solver and weight gradients"""

    @pytest.fixture
    def small_problem(self, rng):
        gt = transform_from(3.0, axis=(0.1, 0.0, 1.0), translation=(0.05, 0.02, -0.01))
        source, target = make_pair(rng, gt, n_points=60, noise=0.005)
        params = CovarianceParams(k_neighbors=8)
        problem = WgicpProblem(
            source=estimate_covariances(source, params),
            target=estimate_covariances(target, params),
            k_d=2,
            lm=LmParams(gate=GateMode.SMOOTH_GATED, unroll_iterations=3),
        )
        return problem, gt

    def test_trace_lengths(self, motion_pair):
        source, target, _ = motion_pair
        lm = LmParams(gate=GateMode.SMOOTH_GATED, unroll_iterations=6)
        result = align_wgicp(
            WgicpProblem(source=source, target=target, k_d=1, lm=lm), mode=SolverMode.DIFFERENTIABLE
        )
        assert result.mode == SolverMode.DIFFERENTIABLE
        assert result.iterations == 6
        assert len(result.objective_trace) == 7
        assert len(result.lambda_trace) == 7
        assert len(result.gate_trace) == 6
        assert all(0.0 <= g <= 1.0 for g in result.gate_trace)
        assert all(lm.lambda_min <= lam <= lm.lambda_max * (1.0 + 1e-12) for lam in result.lambda_trace)

    def test_unrolled_reduces_objective(self, motion_pair):
        source, target, _ = motion_pair
        lm = LmParams(gate=GateMode.SMOOTH_GATED, unroll_iterations=10)
        solution = unroll_wgicp(WgicpProblem(source=source, target=target, k_d=1, lm=lm))
        trace = solution.result.objective_trace
        assert trace[-1] < trace[0]

    def test_reversed_gate_in_unrolled_solver(self, small_problem):
        problem, _ = small_problem
        mid = 0.5 * (problem.lm.lambda_min + problem.lm.lambda_max)
        normal = unroll_wgicp(problem).result
        assert normal.objective_trace[1] < normal.objective_trace[0]
        assert normal.gate_trace[0] > 0.5
        assert normal.lambda_trace[1] < mid

        flipped = problem.model_copy(update={"lm": problem.lm.model_copy(update={"reversed_gate": True})})
        result = unroll_wgicp(flipped).result
        assert len(result.gate_trace) == 3
        assert result.gate_trace[0] < 0.5
        assert result.gate_trace[0] == pytest.approx(1.0 - normal.gate_trace[0], abs=1e-12)
        assert result.lambda_trace[1] > mid
        assert np.all(np.isfinite(result.transform.matrix))

    def test_pose_error_floor(self):
        gt = transform_from(20.0, translation=(1.0, 2.0, 3.0))
        assert float(pose_error(gt.rotation, gt.translation, gt)) == pytest.approx(1e-12)
        moved = float(pose_error(gt.rotation, gt.translation + [1.0, 0.0, 0.0], gt))
        assert moved == pytest.approx(1.0)

    def test_weight_gradients_match_finite_differences(self, small_problem):
        problem, gt = small_problem
        grads = pose_gradients(problem, gt)
        assert grads.source.shape == (len(problem.source),)
        assert grads.target.shape == (len(problem.target),)
        assert np.any(grads.source != 0.0)

        ws0, wt0 = np.ones(len(problem.source)), np.ones(len(problem.target))

        def loss(ws, wt):
            solution = unroll_wgicp(problem, ws, wt)
            return float(pose_error(solution.rotation, solution.translation, gt))

        assert loss(ws0, wt0) == pytest.approx(grads.loss, rel=1e-12)
        h = 1e-6
        for i in (0, 7, 23, 41, 59):
            e = np.zeros_like(ws0)
            e[i] = h
            fd = (loss(ws0 + e, wt0) - loss(ws0 - e, wt0)) / (2.0 * h)
            assert grads.source[i] == pytest.approx(fd, rel=1e-3, abs=1e-7)
            e = np.zeros_like(wt0)
            e[i] = h
            fd = (loss(ws0, wt0 + e) - loss(ws0, wt0 - e)) / (2.0 * h)
            assert grads.target[i] == pytest.approx(fd, rel=1e-3, abs=1e-7)

    def test_saturated_gates_match_fast_solver(self, motion_pair):
        source, target, gt = motion_pair
        lm = LmParams(gate=GateMode.SMOOTH_GATED, gate_scale=1e-12, unroll_iterations=20)
        unrolled = unroll_wgicp(WgicpProblem(source=source, target=target, k_d=1, lm=lm)).result
        fast = align_gicp(source, target)
        np.testing.assert_allclose(unrolled.transform.matrix, fast.transform.matrix, atol=1e-6)
        assert_recovered(unrolled, gt)

    def test_moving_blob_weights_raise_the_loss(self, rng):
        gt = transform_from(2.0, translation=(0.05, 0.0, 0.0))
        pair = make_outlier_pair(rng, n_points=80, outlier_fraction=0.25, transform=gt, noise=0.0)
        params = CovarianceParams(k_neighbors=8)
        problem = WgicpProblem(
            source=estimate_covariances(pair.source, params),
            target=estimate_covariances(pair.target, params),
            k_d=2,
            lm=LmParams(gate=GateMode.SMOOTH_GATED, unroll_iterations=5),
        )
        grads = pose_gradients(problem, gt)
        blob = np.zeros(len(problem.source))
        blob[pair.outliers] = 1.0
        slope = float(grads.source @ blob)

        ones_s, ones_t = np.ones(len(problem.source)), np.ones(len(problem.target))

        def loss(ws):
            solution = unroll_wgicp(problem, ws, ones_t)
            return float(pose_error(solution.rotation, solution.translation, gt))

        h = 1e-4
        fd = (loss(ones_s + h * blob) - loss(ones_s - h * blob)) / (2.0 * h)
        # Gradient descent pushes the blob weights down
        assert slope > 0.0
        assert fd > 0.0

    def test_duplicate_source_points_get_equal_gradients(self, rng):
        gt = transform_from(2.0, translation=(0.03, 0.0, 0.01))
        source, _ = make_pair(rng, gt, n_points=60)
        points = np.vstack([source.points, source.points[:1]])
        params = CovarianceParams(k_neighbors=8)
        problem = WgicpProblem(
            source=estimate_covariances(PointCloud(points), params),
            target=estimate_covariances(PointCloud(gt.apply(points)), params),
            k_d=2,
            lm=LmParams(gate=GateMode.SMOOTH_GATED, unroll_iterations=3),
        )
        grads = pose_gradients(problem, gt)
        assert grads.source[0] == pytest.approx(grads.source[-1], rel=1e-9, abs=1e-15)
