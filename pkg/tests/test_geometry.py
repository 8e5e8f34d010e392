"""
Tests for geometry tools
Point clouds, rigid transforms, exp/log maps and voxel downsampling
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path so imports work
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.tools.geometry_tools import (
    PointCloud,
    RigidTransform,
    Twist,
    compose,
    exp_map,
    log_map,
    nearest_rotation,
    rotation_angle,
    voxel_downsample,
)
from src.tools.synthetic_tools import random_transform, transform_from
from src.utils.errors import AngleNearPi, InvalidCloud, InvalidTransform, NonPositiveVoxel


def rz(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestRigidTransform:
    """Composition, inverse and application"""

    @pytest.mark.smoke
    def test_identity_compose(self):
        I = RigidTransform.identity()
        assert compose(I, I).almost_equal(I)

    @pytest.mark.smoke
    def test_compose_with_inverse(self, rng):
        T = random_transform(rng)
        assert compose(T, T.inverse()).almost_equal(RigidTransform.identity())
        assert compose(T.inverse(), T).almost_equal(RigidTransform.identity())

    def test_compose_then_apply(self):
        T = RigidTransform(rz(90.0), [1.0, 0.0, 0.0])
        p = compose(T, RigidTransform.identity()).apply([1.0, 0.0, 0.0])
        np.testing.assert_allclose(p, [1.0, 1.0, 0.0], atol=1e-12)

    def test_compose_order(self, rng):
        a, b = random_transform(rng), random_transform(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)

    def test_compose_associative(self, rng):
        for _ in range(20):
            a, b, c = (random_transform(rng) for _ in range(3))
            assert ((a @ b) @ c).almost_equal(a @ (b @ c))

    @pytest.mark.smoke
    def test_apply_examples(self):
        np.testing.assert_allclose(RigidTransform.identity().apply([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
        shift = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
        np.testing.assert_allclose(shift.apply([0.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
        np.testing.assert_allclose(RigidTransform(rz(90.0), np.zeros(3)).apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)

    def test_apply_preserves_distances(self, rng):
        T = random_transform(rng, max_angle_deg=170.0, max_translation=5.0)
        p, q = rng.normal(size=(2, 3)) * 10.0
        assert abs(np.linalg.norm(T.apply(p) - T.apply(q)) - np.linalg.norm(p - q)) < 1e-9

    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidTransform):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(InvalidTransform):
            RigidTransform(np.eye(3) * 1.01, np.zeros(3))

    def test_matrix_round_trip(self, rng):
        T = random_transform(rng)
        assert RigidTransform.from_matrix(T.matrix).almost_equal(T)
        assert RigidTransform.from_matrix(T.matrix[:3, :]).almost_equal(T)


class TestExpLog:
    """Twist exponential and logarithm"""

    @pytest.mark.smoke
    def test_zero_twist_is_identity(self):
        assert exp_map(Twist.zero()).almost_equal(RigidTransform.identity(), tol=0.0)

    def test_quarter_turn_about_z(self):
        T = exp_map(Twist([0.0, 0.0, math.pi / 2], np.zeros(3)))
        np.testing.assert_allclose(T.rotation, rz(90.0), atol=1e-12)
        np.testing.assert_allclose(T.translation, np.zeros(3), atol=1e-15)

    def test_exp_result_is_rotation(self, rng):
        for _ in range(50):
            T = exp_map(Twist.from_vector(rng.normal(size=6)))
            RigidTransform(T.rotation, T.translation)  # validates orthonormality

    def test_log_exp_round_trip(self, rng):
        for _ in range(1000):
            direction = rng.normal(size=3)
            rot = direction / np.linalg.norm(direction) * rng.uniform(0.0, 3.0)
            xi = np.concatenate([rot, rng.normal(size=3)])
            back = log_map(exp_map(Twist.from_vector(xi))).as_vector()
            np.testing.assert_allclose(back, xi, atol=1e-9)

    def test_round_trip_small_angle(self):
        xi = np.array([1e-9, -2e-9, 3e-9, 0.1, 0.2, 0.3])
        np.testing.assert_allclose(log_map(exp_map(Twist.from_vector(xi))).as_vector(), xi, atol=1e-12)

    def test_log_at_cut_locus(self):
        with pytest.raises(AngleNearPi):
            log_map(RigidTransform(np.diag([-1.0, -1.0, 1.0]), np.zeros(3)))

    def test_rotation_angle(self):
        assert rotation_angle(rz(30.0)) == pytest.approx(math.radians(30.0), abs=1e-12)
        assert rotation_angle(np.eye(3)) == 0.0

    def test_nearest_rotation_projects(self, rng):
        R = transform_from(25.0, axis=(1.0, 2.0, 3.0)).rotation
        noisy = R + rng.normal(scale=1e-4, size=(3, 3))
        P = nearest_rotation(noisy)
        np.testing.assert_allclose(P.T @ P, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(P, R, atol=1e-3)


class TestPointCloud:
    """Validation and derived clouds"""

    def test_rejects_bad_shapes_and_values(self):
        with pytest.raises(InvalidCloud):
            PointCloud(np.zeros((3, 2)))
        with pytest.raises(InvalidCloud):
            PointCloud([[0.0, np.nan, 0.0]])
        with pytest.raises(InvalidCloud):
            PointCloud(np.zeros((2, 3)), weights=[0.5, 1.5])

    def test_rejects_indefinite_covariance(self):
        with pytest.raises(InvalidCloud):
            PointCloud(np.zeros((1, 3)), covariances=[np.diag([1.0, 1.0, -1.0])])

    def test_select_carries_attributes(self):
        cloud = PointCloud(np.arange(12.0).reshape(4, 3), np.tile(np.eye(3), (4, 1, 1)), [0.1, 0.2, 0.3, 0.4])
        sub = cloud.select([3, 1])
        np.testing.assert_array_equal(sub.points, cloud.points[[3, 1]])
        np.testing.assert_array_equal(sub.weights, [0.4, 0.2])
        assert sub.covariances.shape == (2, 3, 3)

    def test_transformed_rotates_covariances(self):
        cov = np.diag([1.0, 0.0, 0.0])
        cloud = PointCloud([[1.0, 0.0, 0.0]], [cov])
        moved = cloud.transformed(RigidTransform(rz(90.0), np.zeros(3)))
        np.testing.assert_allclose(moved.covariances[0], np.diag([0.0, 1.0, 0.0]), atol=1e-15)

    def test_points_are_read_only(self):
        cloud = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 1.0


class TestVoxelDownsample:
    """Centroid-per-voxel downsampling"""

    @pytest.mark.smoke
    def test_empty_cloud(self):
        assert len(voxel_downsample(PointCloud.empty(), 0.5)) == 0

    def test_one_voxel_centroid(self, rng):
        pts = rng.uniform(0.05, 0.45, size=(8, 3))
        out = voxel_downsample(PointCloud(pts), 0.5)
        assert len(out) == 1
        np.testing.assert_allclose(out.points[0], pts.mean(axis=0), atol=1e-12)

    def test_sparse_grid_keeps_every_point(self):
        g = np.arange(4) * 1.0 + 0.1
        pts = np.array([[x, y, z] for x in g for y in g for z in g])
        out = voxel_downsample(PointCloud(pts), 0.5)
        assert len(out) == len(pts)

    def test_idempotent_count(self, scene):
        once = voxel_downsample(scene, 0.3)
        twice = voxel_downsample(once, 0.3)
        assert len(twice) == len(once)
        assert len(once) <= len(scene)

    def test_boundary_point_goes_to_lower_face_voxel(self):
        # floor(0.5 / 0.5) = 1: the face point joins 0.6, not 0.4
        out = voxel_downsample(PointCloud([[0.5, 0.1, 0.1], [0.6, 0.1, 0.1]]), 0.5)
        assert len(out) == 1
        out = voxel_downsample(PointCloud([[0.4, 0.1, 0.1], [0.5, 0.1, 0.1]]), 0.5)
        np.testing.assert_allclose(out.points, [[0.4, 0.1, 0.1], [0.5, 0.1, 0.1]], atol=1e-15)
        out = voxel_downsample(PointCloud([[-0.5, 0.0, 0.0], [-0.3, 0.0, 0.0]]), 0.5)
        np.testing.assert_allclose(out.points, [[-0.4, 0.0, 0.0]], atol=1e-15)

    def test_non_positive_voxel(self):
        with pytest.raises(NonPositiveVoxel):
            voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)
        with pytest.raises(NonPositiveVoxel):
            voxel_downsample(PointCloud(np.zeros((1, 3))), -1.0)
