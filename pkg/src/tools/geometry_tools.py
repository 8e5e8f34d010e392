"""Core 3D types: point clouds, SE(3) transforms, twists, voxel downsampling.

All types are immutable values (their arrays are read-only copies), so
they can be shared freely. Coordinates are float64 meters.

Twists pack rotation first: xi = [rot_vec (rad); trans_vec (m)]. The
exponential uses Rodrigues' formula for the rotation and the SE(3) left
Jacobian V for the translation block: exp(xi) = (R(ω), V(ω)·v).
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from ..utils.consts import ANGLE_CUT_MARGIN, PSD_TOL, ROTATION_TOL
from ..utils.errors import AngleNearPi, InvalidCloud, InvalidTransform, NonPositiveVoxel
from . import autodiff_tools as ad

Points = NDArray[np.float64]  # (N, 3)
Point3 = NDArray[np.float64]  # (3,)
Mat3 = NDArray[np.float64]
Mat4 = NDArray[np.float64]


def _frozen(x: NDArray) -> NDArray[np.float64]:
    arr = np.array(x, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def as_point3(p) -> Point3:
    """Validate a single finite 3-vector."""
    arr = np.asarray(p, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise InvalidCloud(f"expected a finite 3-vector, got {p!r}")
    return arr


# =============================================================================
# POINT CLOUD
# =============================================================================


class PointCloud:
    """Ordered points with optional per-point covariances (m²) and weights in [0, 1]."""

    __slots__ = ("_points", "_covariances", "_weights")

    def __init__(
        self,
        points,
        covariances=None,
        weights=None,
        *,
        validate: bool = True,
    ) -> None:
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if validate:
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise InvalidCloud(f"points must have shape (N, 3), got {pts.shape}")
            if not np.all(np.isfinite(pts)):
                bad = int(np.argmax(~np.all(np.isfinite(pts), axis=1)))
                raise InvalidCloud(f"non-finite coordinate at point {bad}", context={"index": bad})
        self._points = _frozen(pts)
        self._covariances = None
        self._weights = None
        if covariances is not None:
            cov = np.asarray(covariances, dtype=np.float64)
            if validate:
                _check_covariances(cov, len(pts))
            self._covariances = _frozen(cov)
        if weights is not None:
            w = np.asarray(weights, dtype=np.float64).reshape(-1)
            if validate:
                if w.shape != (len(pts),):
                    raise InvalidCloud(f"{len(w)} weights for {len(pts)} points")
                if not np.all(np.isfinite(w)) or np.any(w < 0.0) or np.any(w > 1.0):
                    raise InvalidCloud("weights must lie in [0, 1]")
            self._weights = _frozen(w)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        """Stack clouds; covariances/weights are kept only if every cloud has them."""
        points = np.concatenate([c.points for c in clouds], axis=0)
        covs = None
        if all(c.covariances is not None for c in clouds):
            covs = np.concatenate([c.covariances for c in clouds], axis=0)
        weights = None
        if all(c.weights is not None for c in clouds):
            weights = np.concatenate([c.weights for c in clouds], axis=0)
        return cls(points, covs, weights, validate=False)

    def __len__(self) -> int:
        return len(self._points)

    def __repr__(self) -> str:
        return (
            f"PointCloud(n={len(self)}, covariances={self._covariances is not None}, "
            f"weights={self._weights is not None})"
        )

    @property
    def points(self) -> Points:
        return self._points

    @property
    def covariances(self) -> Optional[NDArray[np.float64]]:
        return self._covariances

    @property
    def weights(self) -> Optional[NDArray[np.float64]]:
        return self._weights

    @property
    def is_empty(self) -> bool:
        return len(self._points) == 0

    def weights_or_ones(self) -> NDArray[np.float64]:
        if self._weights is not None:
            return self._weights
        return np.ones(len(self))

    def with_covariances(self, covariances) -> "PointCloud":
        return PointCloud(self._points, covariances, self._weights)

    def with_weights(self, weights) -> "PointCloud":
        return PointCloud(self._points, self._covariances, weights)

    def without_weights(self) -> "PointCloud":
        return PointCloud(self._points, self._covariances, None, validate=False)

    def select(self, indices) -> "PointCloud":
        """Subset (in the given index order), carrying covariances and weights."""
        idx = np.asarray(indices, dtype=np.intp)
        return PointCloud(
            self._points[idx],
            None if self._covariances is None else self._covariances[idx],
            None if self._weights is None else self._weights[idx],
            validate=False,
        )

    def transformed(self, T: "RigidTransform") -> "PointCloud":
        """Move the cloud rigidly; covariances rotate as R C Rᵀ."""
        covs = None
        if self._covariances is not None:
            R = T.rotation
            covs = R @ self._covariances @ R.T
        return PointCloud(T.apply(self._points), covs, self._weights, validate=False)


def _check_covariances(cov: NDArray[np.float64], n: int) -> None:
    if cov.shape != (n, 3, 3):
        raise InvalidCloud(f"covariances must have shape ({n}, 3, 3), got {cov.shape}")
    if n == 0:
        return
    if not np.all(np.isfinite(cov)):
        raise InvalidCloud("non-finite covariance entry")
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - np.swapaxes(cov, 1, 2))) > PSD_TOL * scale:
        raise InvalidCloud("covariances must be symmetric")
    min_eig = np.linalg.eigvalsh(cov)[:, 0]
    if np.any(min_eig < -PSD_TOL * scale):
        bad = int(np.argmin(min_eig))
        raise InvalidCloud(
            f"covariance {bad} is not positive semi-definite (min eigenvalue {min_eig[bad]:.3e})",
            context={"index": bad},
        )


# =============================================================================
# RIGID TRANSFORM
# =============================================================================


class RigidTransform:
    """SE(3) pose: p ↦ R p + t."""

    __slots__ = ("_rotation", "_translation")

    def __init__(self, rotation, translation, *, check: bool = True) -> None:
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidTransform(f"rotation {R.shape} / translation {t.shape}")
        if check:
            if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
                raise InvalidTransform("non-finite transform entry")
            deviation = float(np.max(np.abs(R.T @ R - np.eye(3))))
            if deviation > ROTATION_TOL or np.linalg.det(R) <= 0.0:
                raise InvalidTransform(
                    f"rotation is not orthonormal with det +1 (deviation {deviation:.3e})"
                )
        self._rotation = _frozen(R)
        self._translation = _frozen(t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), check=False)

    @classmethod
    def from_matrix(cls, matrix, *, check: bool = True) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise InvalidTransform(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3], check=check)

    @property
    def rotation(self) -> Mat3:
        return self._rotation

    @property
    def translation(self) -> Point3:
        return self._translation

    @property
    def matrix(self) -> Mat4:
        m = np.eye(4)
        m[:3, :3] = self._rotation
        m[:3, 3] = self._translation
        return m

    def inverse(self) -> "RigidTransform":
        Rt = self._rotation.T
        return RigidTransform(Rt, -Rt @ self._translation, check=False)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """(self ∘ other)(p) = self(other(p))."""
        return RigidTransform(
            self._rotation @ other._rotation,
            self._rotation @ other._translation + self._translation,
            check=False,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def apply(self, points) -> NDArray[np.float64]:
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self._rotation.T + self._translation

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.matrix - other.matrix)) <= tol)

    def __repr__(self) -> str:
        return f"RigidTransform(angle={math.degrees(rotation_angle(self._rotation)):.4f}deg, t={self._translation.round(6).tolist()})"


@dataclass(frozen=True)
class Twist:
    """se(3) coordinates: axis-angle rotation (rad) and translation (m)."""

    rot_vec: Point3
    trans_vec: Point3

    def __post_init__(self) -> None:
        object.__setattr__(self, "rot_vec", _frozen(as_point3(self.rot_vec)))
        object.__setattr__(self, "trans_vec", _frozen(as_point3(self.trans_vec)))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        v = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> NDArray[np.float64]:
        return np.concatenate([self.rot_vec, self.trans_vec])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


# =============================================================================
# OPERATIONS
# =============================================================================


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def apply(T: RigidTransform, p) -> NDArray[np.float64]:
    return T.apply(p)


def skew(w):
    """[w]ₓ for (..., 3) vectors; accepts arrays or tape Vars."""
    w0, w1, w2 = (ad.getitem(w, (..., i)) for i in range(3))
    zero = np.zeros(np.shape(ad.value(w0)))
    rows = [
        ad.stack([zero, ad.neg(w2), w1], axis=-1),
        ad.stack([w2, zero, ad.neg(w0)], axis=-1),
        ad.stack([ad.neg(w1), w0, zero], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def exp_se3(xi) -> Tuple[object, object]:
    """exp of a packed 6-vector twist -> (R, t). Works on arrays and tape Vars."""
    omega = ad.getitem(xi, slice(0, 3))
    v = ad.getitem(xi, slice(3, 6))
    coeffs = ad.so3_coefficients(ad.dot(omega, omega))
    a, b, c = (ad.getitem(coeffs, i) for i in range(3))
    K = skew(omega)
    K2 = ad.matmul(K, K)
    eye = np.eye(3)
    R = ad.add(ad.add(eye, ad.mul(a, K)), ad.mul(b, K2))
    V = ad.add(ad.add(eye, ad.mul(b, K)), ad.mul(c, K2))
    return R, ad.matvec3(V, v)


def exp_map(xi: Twist) -> RigidTransform:
    R, t = exp_se3(xi.as_vector())
    return RigidTransform(R, t, check=False)


def rotation_angle(R: Mat3) -> float:
    """Rotation angle in [0, π], robust near 0 and π."""
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(math.atan2(np.linalg.norm(v), 0.5 * (np.trace(R) - 1.0)))


def log_map(T: RigidTransform) -> Twist:
    R = T.rotation
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    theta = math.atan2(float(np.linalg.norm(v)), 0.5 * (float(np.trace(R)) - 1.0))
    if theta >= math.pi - ANGLE_CUT_MARGIN:
        raise AngleNearPi(
            f"rotation angle {theta:.9f} rad is at the cut locus of the logarithm",
            context={"angle": theta},
        )
    # v = sin(θ)·axis and np.sinc(θ/π) = sin(θ)/θ
    omega = v / np.sinc(theta / math.pi)
    coeffs = ad.so3_coefficients(np.array(theta * theta))
    K = skew(omega)
    V = np.eye(3) + coeffs[1] * K + coeffs[2] * (K @ K)
    return Twist(omega, np.linalg.solve(V, T.translation))


def nearest_rotation(m: Mat3) -> Mat3:
    """Closest proper rotation in Frobenius norm (SVD projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """
    Replace the points of every occupied voxel by their centroid.

    Voxel index is floor(coord / voxel_size) per axis, so a point lying
    exactly on a face belongs to the voxel whose lower face it is. Output
    is ordered by voxel index; weights (if any) are averaged per voxel and
    covariances are dropped (they are re-estimated on the downsampled cloud).
    """
    if not (voxel_size > 0.0 and math.isfinite(voxel_size)):
        raise NonPositiveVoxel(f"voxel_size must be positive, got {voxel_size}")
    if cloud.is_empty:
        return PointCloud.empty()

    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]

    weights = None
    if cloud.weights is not None:
        weights = np.bincount(inverse, weights=cloud.weights, minlength=len(counts)) / counts
        weights = np.clip(weights, 0.0, 1.0)
    return PointCloud(centroids, None, weights, validate=False)

