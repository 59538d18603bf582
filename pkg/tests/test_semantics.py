import numpy as np
import pytest

from treemorph.errors import DegenerateInput, InsufficientData, MissingConstraint
from treemorph.geometry import Cylinder, Intrinsics, RigidTransform, frame_from_axis
from treemorph.semantics import (
    Silhouette,
    fit_cylinder_nine_point,
    fit_ground_plane_with_prior,
    fit_line_tls,
    fit_plane_ransac,
    fit_trunk_cylinder,
    fit_trunk_two_sided,
    project_cylinder_silhouette,
    trunk_cost,
)

K = Intrinsics(320, 320, 320, 240)
# camera 2 m in front of a vertical trunk at the origin, looking along +y
CAM = RigidTransform(np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]]), np.array([0, -0.5, 2.0]))
TRUNK = Cylinder([0.02, 0.0, 1.0], [0.0, 0.0, 0.0], 0.04, 0.6)


def surface_points(c, n, rng, heights=(0.1, 0.6), arc=(0, 2 * np.pi)):
    T = frame_from_axis(c.axis, c.origin, along=0).inverse()
    s = rng.uniform(*heights, n)
    th = rng.uniform(*arc, n)
    local = np.c_[s, c.radius * np.cos(th), c.radius * np.sin(th)]
    return T.apply(local)


class TestLines:
    def test_tls_line(self):
        x = np.linspace(0, 10, 11)
        L = fit_line_tls(np.c_[x, 3 * x - 2])
        assert np.abs(L.distance(np.c_[x, 3 * x - 2])).max() < 1e-12
        assert abs(L.distance(np.array([0.0, 0.0]))) == pytest.approx(2 / np.sqrt(10))

    def test_tls_degenerate(self):
        with pytest.raises(DegenerateInput):
            fit_line_tls(np.ones((5, 2)))

    def test_silhouette_is_tangent(self):
        # every projected surface point lies between the two lines; the extremes touch them
        rng = np.random.default_rng(0)
        P = surface_points(TRUNK, 200000, rng, heights=(0.2, 0.4))
        uv = np.array([K.fx, K.fy]) * (CAM.apply(P)[:, :2] / CAM.apply(P)[:, 2:]) + [K.cx, K.cy]
        left, right = project_cylinder_silhouette(TRUNK, CAM, K)
        dl = left.distance(uv)
        dr = right.distance(uv)
        assert np.sign(np.median(dl)) != np.sign(np.median(dr))
        assert min(np.abs(dl).min(), np.abs(dr).min()) < 1e-3
        inside_l = np.sign(np.median(dl)) * dl
        inside_r = np.sign(np.median(dr)) * dr
        assert inside_l.min() > -1e-9 and inside_r.min() > -1e-9

    def test_left_to_right(self):
        left, right = project_cylinder_silhouette(TRUNK, CAM, K)
        u = [-(l.coefficients[1] * K.cy + l.coefficients[2]) / l.coefficients[0] for l in (left, right)]
        assert u[0] < u[1]


class TestCylinderFits:
    def test_nine_point_exact(self):
        P = surface_points(TRUNK, 9, np.random.default_rng(1))
        c = fit_cylinder_nine_point(P)
        assert c.radius == pytest.approx(TRUNK.radius, abs=1e-9)
        assert abs(abs(c.axis @ TRUNK.axis) - 1) < 1e-12

    def test_nine_point_needs_nine(self):
        assert fit_cylinder_nine_point(np.zeros((8, 3))) is None

    def test_trunk_fit_with_outliers(self):
        rng = np.random.default_rng(2)
        P = surface_points(TRUNK, 400, rng, arc=(np.pi, 2 * np.pi))
        P += rng.normal(scale=0.002, size=P.shape)
        P = np.vstack([P, rng.uniform(-0.3, 0.3, (80, 3)) + [0, 0, 0.3]])
        c = fit_trunk_cylinder(P, lam=0.0)
        assert c.radius == pytest.approx(TRUNK.radius, abs=2e-3)

    def test_lambda_needs_lines(self):
        P = surface_points(TRUNK, 50, np.random.default_rng(3))
        with pytest.raises(MissingConstraint):
            fit_trunk_cylinder(P, lam=1.0)

    def test_too_few_points(self):
        with pytest.raises(InsufficientData):
            fit_trunk_cylinder(np.zeros((5, 3)), lam=0.0)

    def test_silhouettes_correct_depth_bias(self):
        # depth points biased outward inflate the radius; true boundary lines pull it back
        rng = np.random.default_rng(4)
        P = surface_points(TRUNK, 300, rng, arc=(np.pi, 2 * np.pi))
        centre = TRUNK.origin + ((P - TRUNK.origin) @ TRUNK.axis)[:, None] * TRUNK.axis
        P = P + 0.006 * (P - centre) / TRUNK.radius
        cams = [RigidTransform(CAM.rotation, CAM.translation + [dx, 0, 0]) for dx in (-0.3, 0.0, 0.3)]
        sils = [Silhouette(T, K, project_cylinder_silhouette(TRUNK, T, K)) for T in cams]
        plain = fit_trunk_cylinder(P, lam=0.0)
        joint = fit_trunk_cylinder(P, sils, lam=1e3)
        assert abs(plain.radius - TRUNK.radius) > 4e-3
        assert abs(joint.radius - TRUNK.radius) < abs(plain.radius - TRUNK.radius) / 3

    def test_cost_zero_at_truth(self):
        P = surface_points(TRUNK, 100, np.random.default_rng(5))
        sil = Silhouette(CAM, K, project_cylinder_silhouette(TRUNK, CAM, K))
        assert trunk_cost(P, TRUNK, [sil], lam=1.0) < 1e-20

    def test_two_sided_shares_radius(self):
        rng = np.random.default_rng(6)
        F = surface_points(TRUNK, 300, rng, arc=(np.pi, 2 * np.pi)) + rng.normal(scale=0.001, size=(300, 3))
        B = surface_points(TRUNK, 300, rng, arc=(0, np.pi)) + rng.normal(scale=0.001, size=(300, 3))
        cf, cb, d = fit_trunk_two_sided(F, B, lam=0.0)
        assert cf.radius == cb.radius
        assert d == pytest.approx(2 * TRUNK.radius, abs=1e-3)


def ground_with_hedge(seed=0, ground_fraction=0.2, n=2000):
    """A tilted ground patch plus a dominant vertical hedge face above it."""
    rng = np.random.default_rng(seed)
    ng = int(n * ground_fraction)
    normal = np.array([np.sin(np.radians(5)), 0, np.cos(np.radians(5))])
    g = rng.uniform(-1, 1, (ng, 3))
    g -= np.outer(g @ normal, normal)
    h = np.c_[rng.uniform(-1, 1, n - ng), np.full(n - ng, 0.4), rng.uniform(0.1, 1.5, n - ng)]
    P = np.vstack([g, h]) + rng.normal(scale=0.005, size=(n, 3))
    return P, normal


class TestGroundPlane:
    def test_plain_ransac_takes_majority(self):
        P, normal = ground_with_hedge()
        pl = fit_plane_ransac(P)
        assert abs(pl.normal @ normal) < 0.2

    def test_prior_finds_ground(self):
        P, normal = ground_with_hedge()
        pl = fit_ground_plane_with_prior(P, [0, 0, 1.0])
        assert np.degrees(np.arccos(pl.normal @ normal)) < 1.0
        assert abs(pl.signed_distance(np.zeros((1, 3)))[0]) < 0.01

    def test_prior_orients_normal(self):
        P, _ = ground_with_hedge(seed=1, ground_fraction=0.6)
        assert fit_ground_plane_with_prior(P, [0, 0, 1.0]).normal[2] > 0

    def test_too_few(self):
        with pytest.raises(InsufficientData):
            fit_ground_plane_with_prior(np.zeros((2, 3)), [0, 0, 1.0])
