import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from treemorph.errors import BehindCamera, DegenerateInput, InvalidRotation
from treemorph.geometry import (
    Cylinder,
    ImageLine,
    Intrinsics,
    Plane,
    RigidTransform,
    canonical_line,
    cylinder_surface_loss,
    frame_from_axis,
    nearest_rotation,
    plane_slab_loss,
    point_cylinder_distance,
    project_point,
    rodrigues_exp,
    rodrigues_log,
)

vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3).map(np.array)


def series_exp(v, terms=30):
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    out, term = np.eye(3), np.eye(3)
    for k in range(1, terms):
        term = term @ K / k
        out = out + term
    return out


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()


class TestRodrigues:
    def test_zero_is_identity(self):
        assert np.array_equal(rodrigues_exp(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = rodrigues_exp([0, 0, np.pi / 2])
        assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_matches_power_series(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            v = rng.normal(size=3)
            v *= 0.7 / np.linalg.norm(v)
            assert np.abs(rodrigues_exp(v) - series_exp(v)).max() < 1e-10

    def test_batched_matches_single(self):
        V = np.random.default_rng(2).normal(size=(7, 3))
        R = rodrigues_exp(V)
        for v, r in zip(V, R):
            assert np.allclose(rodrigues_exp(v), r, atol=1e-15)

    def test_log_identity(self):
        assert np.allclose(rodrigues_log(np.eye(3)), 0)

    def test_log_half_turn_about_x(self):
        R = np.diag([1.0, -1.0, -1.0])
        assert np.allclose(np.abs(rodrigues_log(R)), [np.pi, 0, 0], atol=1e-12)

    def test_round_trip_1000(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(1000):
            R = random_rotation(rng)
            worst = max(worst, np.abs(rodrigues_exp(rodrigues_log(R)) - R).max())
        assert worst < 1e-9

    def test_log_rejects_non_orthonormal(self):
        with pytest.raises(InvalidRotation):
            rodrigues_log(np.diag([1.0, 1.0, 1.1]))

    @given(vec3)
    def test_exp_is_orthonormal(self, v):
        R = rodrigues_exp(v)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)


def brute_force_nearest(M):
    """Dense sample of rotations, then a local refine in the tangent space of the best one."""
    grid = Rotation.random(20000, random_state=0).as_matrix()
    R0 = grid[np.argmin(np.sum((grid - M) ** 2, axis=(1, 2)))]

    def f(d):
        return np.sum((R0 @ Rotation.from_rotvec(d).as_matrix() - M) ** 2)

    for _ in range(3):
        d = minimize(f, np.zeros(3), method="BFGS", options={"gtol": 1e-14}).x
        R0 = R0 @ Rotation.from_rotvec(d).as_matrix()
    return R0


class TestNearestRotation:
    def test_rotation_is_fixed_point(self):
        R = random_rotation(np.random.default_rng(4))
        assert np.allclose(nearest_rotation(R), R, atol=1e-14)

    def test_positive_scaling(self):
        R = random_rotation(np.random.default_rng(5))
        assert np.allclose(nearest_rotation(2 * R), R, atol=1e-14)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            M = random_rotation(rng) + 0.05 * rng.normal(size=(3, 3))
            assert np.abs(nearest_rotation(M) - brute_force_nearest(M)).max() < 1e-6

    def test_idempotent(self):
        M = np.random.default_rng(7).normal(size=(3, 3))
        N = nearest_rotation(M)
        assert np.array_equal(nearest_rotation(N), nearest_rotation(nearest_rotation(N)))

    def test_rank_deficient(self):
        with pytest.raises(DegenerateInput):
            nearest_rotation(np.outer([1.0, 2, 3], [0.0, 1, 0]))


class TestRigidTransform:
    @given(vec3, vec3)
    def test_compose_inverse_is_identity(self, v, t):
        T = RigidTransform.from_vector(np.r_[v, t])
        I = T @ T.inverse()
        assert np.allclose(I.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(I.translation, 0, atol=1e-9)

    def test_vector_round_trip(self):
        x = np.array([0.1, -0.2, 0.3, 1.0, 2.0, 3.0])
        assert np.allclose(RigidTransform.from_vector(x).as_vector(), x, atol=1e-14)

    def test_quaternion_round_trip(self):
        T = RigidTransform.from_vector([0.3, 0.2, -0.1, 1, 2, 3])
        U = RigidTransform.from_quaternion(T.quaternion(), T.translation)
        assert np.allclose(U.as_matrix(), T.as_matrix(), atol=1e-14)

    def test_distance_to_self(self):
        T = RigidTransform.from_vector([0.3, 0.2, -0.1, 1, 2, 3])
        assert T.distance_to(T) == pytest.approx((0.0, 0.0), abs=1e-7)

    def test_frame_from_axis_rows(self):
        T = frame_from_axis([0, 0, 2.0], [1, 2, 3], along=0)
        assert np.allclose(T.rotation[0], [0, 0, 1])
        assert np.allclose(T.apply(np.array([[1.0, 2, 3]])), 0)


def dense_surface_distance(X, c, n=1000):
    T = frame_from_axis(c.axis, c.origin, along=0)
    x = T.apply(X[None])[0]
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    s = np.linspace(x[0] - 0.5, x[0] + 0.5, n)
    S, TH = np.meshgrid(s, th)
    P = np.stack([S, c.radius * np.cos(TH), c.radius * np.sin(TH)], -1).reshape(-1, 3)
    return np.linalg.norm(P - x, axis=1).min()


class TestCylinderDistance:
    c = Cylinder(np.array([0.0, 0, 1]), np.zeros(3), 0.5)

    def test_on_surface(self):
        assert point_cylinder_distance(np.array([[0.5, 0, 3.0]]), self.c)[0] == pytest.approx(0, abs=1e-15)

    def test_on_axis(self):
        assert point_cylinder_distance(np.array([[0, 0, -2.0]]), self.c)[0] == pytest.approx(0.5)

    def test_dense_surface_oracle(self):
        rng = np.random.default_rng(8)
        c = Cylinder(rng.normal(size=3), rng.normal(size=3), 0.3)
        X = c.origin + rng.normal(size=3)
        # grid spacing bounds the oracle's own error
        assert abs(point_cylinder_distance(X[None], c)[0] - dense_surface_distance(X, c)) < 2e-6 + 1e-3 * 0.3 * 2

    @given(vec3, vec3, vec3)
    @settings(max_examples=50)
    def test_rigid_invariance(self, v, t, X):
        c = Cylinder(np.array([0.2, 0.1, 1.0]), np.array([0.1, 0.0, 0.0]), 0.4)
        T = RigidTransform.from_vector(np.r_[v, t])
        d0 = point_cylinder_distance(X[None], c)[0]
        d1 = point_cylinder_distance(T.apply(X[None]), c.transformed(T))[0]
        assert abs(d0 - d1) < 1e-9


class TestObjectLosses:
    def test_slab(self):
        t = 0.05
        assert plane_slab_loss(np.array([[0, 0, 0.5 * t]]), t)[0] == 0
        assert plane_slab_loss(np.array([[0, 0, t + 0.1]]), t)[0] == pytest.approx(0.1)
        assert plane_slab_loss(np.array([[0, 0, -t - 0.25]]), t)[0] == pytest.approx(0.25)

    def test_cylinder_surface(self):
        r = 0.2
        assert cylinder_surface_loss(np.array([[5, r, 0]]), r)[0] == pytest.approx(0, abs=1e-15)
        assert cylinder_surface_loss(np.array([[0, 0, 2 * r]]), r)[0] == pytest.approx(r)
        assert cylinder_surface_loss(np.zeros((1, 3)), r)[0] == pytest.approx(r)

    @given(vec3)
    def test_losses_non_negative(self, x):
        assert plane_slab_loss(x[None], 0.05)[0] >= 0
        assert cylinder_surface_loss(x[None], 0.1)[0] >= 0


class TestProjection:
    K = Intrinsics(500, 500, 320, 240)

    def test_principal_ray(self):
        assert np.allclose(project_point(np.array([0, 0, 1.0]), self.K), [320, 240])

    def test_offset(self):
        assert np.allclose(project_point(np.array([0.1, 0, 1.0]), self.K), [370, 240])

    def test_homogeneous_oracle(self):
        rng = np.random.default_rng(9)
        P = self.K.matrix @ np.hstack([np.eye(3), np.zeros((3, 1))])
        for _ in range(20):
            X = rng.uniform(-1, 1, 3) + [0, 0, 3]
            h = P @ np.r_[X, 1]
            assert np.abs(project_point(X, self.K) - h[:2] / h[2]).max() < 1e-10

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project_point(np.array([0, 0, -1.0]), self.K)


class TestLines:
    def test_canonical_sign(self):
        assert np.allclose(canonical_line([-2.0, 1, 0]), np.array([2.0, -1, 0]) / np.sqrt(5))

    def test_vertical_line(self):
        assert np.allclose(ImageLine([-1.0, 0, 3]).coefficients, np.array([1.0, 0, -3]) / np.sqrt(10))

    def test_plane_signed_distance(self):
        p = Plane(np.array([0, 0, 2.0]), np.array([0, 0, 1.0]))
        assert p.signed_distance(np.array([[5, 5, 3.0]]))[0] == pytest.approx(2.0)
