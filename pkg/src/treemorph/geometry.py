"""Rigid-motion algebra and point-to-primitive distances.

Rotations are stored as 3x3 matrices. Axis-angle vectors only appear as the
local parameterization used by the least-squares solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, DegenerateInput, InvalidRotation

__all__ = [
    "RigidTransform",
    "Intrinsics",
    "Cylinder",
    "Plane",
    "ImageLine",
    "skew",
    "rodrigues_exp",
    "rodrigues_log",
    "nearest_rotation",
    "point_cylinder_distance",
    "plane_slab_loss",
    "cylinder_surface_loss",
    "project_point",
    "canonical_line",
    "frame_from_axis",
]


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; works on (3,) or (n, 3) input."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues_exp(v) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``v``.

    Accepts a single (3,) vector or a stack (n, 3); returns (3, 3) or (n, 3, 3).
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    theta = np.linalg.norm(v, axis=1)
    K = skew(v)
    K2 = K @ K
    small = theta < 1e-12
    th = np.where(small, 1.0, theta)
    # Taylor branch keeps tiny rotations accurate (and exactly identity at 0).
    a = np.where(theta < 1e-4, 1.0 - theta**2 / 6.0 + theta**4 / 120.0, np.sin(th) / th)
    b = np.where(theta < 1e-4, 0.5 - theta**2 / 24.0 + theta**4 / 720.0, (1.0 - np.cos(th)) / th**2)
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2
    R[small] = np.eye(3)
    return R[0] if single else R


def _vee(A: np.ndarray) -> np.ndarray:
    return np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])


def rodrigues_log(R, check: bool = True) -> np.ndarray:
    """Axis-angle vector of rotation ``R`` with angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    if check:
        defect = np.abs(R.T @ R - np.eye(3)).max()
        if defect > 1e-6 or np.linalg.det(R) < 0:
            raise InvalidRotation(f"not a rotation matrix (orthonormality defect {defect:.3g})")
    w = _vee(R)
    s = 0.5 * np.linalg.norm(w)
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arctan2(s, c)
    if theta < 1e-6:
        # first order: R - R^T ~ 2 [v]_x
        return 0.5 * w
    if theta < np.pi - 1e-3:
        return theta / (2.0 * np.sin(theta)) * w
    # near pi the antisymmetric part vanishes; read the axis off the symmetric part
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(B[k, k])
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def nearest_rotation(M) -> np.ndarray:
    """Rotation closest to ``M`` in Frobenius norm (SVD with det correction)."""
    M = np.asarray(M, dtype=float)
    if np.abs(M.T @ M - np.eye(3)).max() <= 1e-12 and np.linalg.det(M) > 0:
        return M.copy()
    U, s, Vt = np.linalg.svd(M)
    if s[-1] <= 1e-9 * s[0]:
        raise DegenerateInput("matrix is rank deficient; no unique nearest rotation")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_vector(cls, x) -> "RigidTransform":
        """From a 6-vector ``(axis-angle, translation)``."""
        x = np.asarray(x, dtype=float)
        return cls(rodrigues_exp(x[:3]), x[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([rodrigues_log(self.rotation, check=False), self.translation])

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_quaternion(cls, q_xyzw, t) -> "RigidTransform":
        return cls(Rotation.from_quat(q_xyzw).as_matrix(), t)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def apply_direction(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation.T

    def distance_to(self, other: "RigidTransform") -> tuple[float, float]:
        """(rotation angle in rad, translation distance) between two transforms."""
        dR = self.rotation.T @ other.rotation
        ang = float(np.linalg.norm(rodrigues_log(nearest_rotation(dR), check=False)))
        return ang, float(np.linalg.norm(self.translation - other.translation))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy]


def project_point(X_cam, K: Intrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (3,) or (n, 3) to pixels."""
    X = np.asarray(X_cam, dtype=float)
    z = X[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point has non-positive depth")
    return np.stack([K.fx * X[..., 0] / z + K.cx, K.fy * X[..., 1] / z + K.cy], axis=-1)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateInput("zero-length direction")
    return v / n


@dataclass(frozen=True)
class Cylinder:
    axis: np.ndarray
    origin: np.ndarray
    radius: float
    height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "axis", _unit(self.axis))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        if not self.radius > 0:
            raise ValueError("cylinder radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "height", float(self.height))

    def regauged(self, points) -> "Cylinder":
        """Same cylinder with origin moved to the axis point nearest the centroid of ``points``."""
        c = np.asarray(points, dtype=float).reshape(-1, 3).mean(axis=0)
        o = self.origin + ((c - self.origin) @ self.axis) * self.axis
        return Cylinder(self.axis, o, self.radius, self.height)

    def transformed(self, T: RigidTransform) -> "Cylinder":
        return Cylinder(T.apply_direction(self.axis), T.apply(self.origin), self.radius, self.height)

    def axis_distance(self, points) -> np.ndarray:
        d = np.asarray(points, dtype=float) - self.origin
        return np.linalg.norm(d - np.multiply.outer(d @ self.axis, self.axis), axis=-1)


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    origin: np.ndarray
    slab_halfwidth: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "normal", _unit(self.normal))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        if self.slab_halfwidth < 0:
            raise ValueError("slab half-width must be non-negative")
        object.__setattr__(self, "slab_halfwidth", float(self.slab_halfwidth))

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) @ self.normal

    def transformed(self, T: RigidTransform) -> "Plane":
        return Plane(T.apply_direction(self.normal), T.apply(self.origin), self.slab_halfwidth)


def canonical_line(coeffs) -> np.ndarray:
    """Unit-norm homogeneous line with the first nonzero of (a, b) positive."""
    l = np.asarray(coeffs, dtype=float)
    n = np.linalg.norm(l, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInput("zero line")
    l = l / n
    lead = np.where(np.abs(l[..., 0]) > 1e-15, l[..., 0], l[..., 1])
    return l * np.where(lead < 0, -1.0, 1.0)[..., None]


@dataclass(frozen=True)
class ImageLine:
    """Homogeneous image line ``a*u + b*v + c = 0`` in pixel coordinates."""

    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coefficients", canonical_line(self.coefficients))

    def distance(self, uv) -> np.ndarray:
        a, b, c = self.coefficients
        uv = np.asarray(uv, dtype=float)
        return (a * uv[..., 0] + b * uv[..., 1] + c) / np.hypot(a, b)


def point_cylinder_distance(X, c: Cylinder) -> np.ndarray:
    """Unsigned distance of point(s) to the (infinite) cylinder surface."""
    return np.abs(c.axis_distance(X) - c.radius)


def plane_slab_loss(X_obj, t_s: float) -> np.ndarray:
    """Distance outside the slab ``|z| <= t_s`` of points in the object frame."""
    z = np.asarray(X_obj, dtype=float)[..., 2]
    return np.maximum(np.maximum(z - t_s, 0.0), -z - t_s)


def cylinder_surface_loss(X_obj, r_s: float) -> np.ndarray:
    """Distance to the cylinder of radius ``r_s`` about the object x-axis."""
    X = np.asarray(X_obj, dtype=float)
    return np.abs(np.hypot(X[..., 1], X[..., 2]) - r_s)


def frame_from_axis(axis, origin, along: int = 0) -> RigidTransform:
    """World->object transform whose ``along`` axis (0=x, 2=z) is ``axis``.

    The remaining axes are chosen deterministically from the world axis least
    aligned with ``axis``.
    """
    a = _unit(axis)
    helper = np.eye(3)[int(np.argmin(np.abs(a)))]
    u = _unit(np.cross(a, helper))
    w = np.cross(a, u)
    if along == 0:
        B = np.stack([a, u, w])  # rows = object axes in world
    elif along == 2:
        B = np.stack([u, w, a])
    else:
        raise ValueError("along must be 0 or 2")
    origin = np.asarray(origin, dtype=float)
    return RigidTransform(B, -B @ origin)
