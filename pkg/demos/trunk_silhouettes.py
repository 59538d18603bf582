"""Boundary lines undo a depth bias on trunk points.

Depth sensors tend to place points on thin trunks slightly behind the
true surface. Fitting a cylinder to such points inflates the radius.
The two image lines where the trunk meets the background do not share
that bias, and adding them to the fit pulls the radius back. Here the
lines are compared in plain normalized image coordinates against hundreds
of points, so they need a large weight to matter.

Run: python demos/trunk_silhouettes.py
"""
import numpy as np

from treemorph.geometry import Cylinder, Intrinsics, RigidTransform
from treemorph.semantics import Silhouette, fit_trunk_cylinder, project_cylinder_silhouette

K = Intrinsics(320, 320, 320, 240)
TRUNK = Cylinder([0.02, 0.0, 1.0], [0.0, 0.0, 0.0], 0.04, 0.6)


def camera(x):
    R = np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]])
    return RigidTransform(R, -R @ np.array([x, -2.0, 0.3]))


def visible_points(rng, bias, n=400):
    """Points on the camera-facing half, pushed outward by ``bias`` plus noise."""
    a = rng.uniform(np.pi, 2 * np.pi, n)
    h = rng.uniform(0.1, 0.6, n)
    u = np.cross(TRUNK.axis, [1.0, 0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(TRUNK.axis, u)
    r = TRUNK.radius + bias + rng.normal(scale=0.003, size=n)
    return TRUNK.origin + np.outer(h, TRUNK.axis) + r[:, None] * (np.outer(np.cos(a), v) + np.outer(np.sin(a), u))


def main():
    rng = np.random.default_rng(0)
    P = visible_points(rng, bias=0.006)
    sils = []
    for k, x in enumerate((-0.3, 0.0, 0.3)):
        pose = camera(x)
        sils.append(Silhouette(pose, K, project_cylinder_silhouette(TRUNK, pose, K), k))
    print(f"true radius          {TRUNK.radius * 1000:.1f} mm")
    print(f"points only          {fit_trunk_cylinder(P, lam=0.0).radius * 1000:.1f} mm  (6 mm outward bias)")
    for lam in (1.0, 1e3):
        print(f"points + lines, lam {lam:<6g}{fit_trunk_cylinder(P, sils, lam=lam).radius * 1000:.1f} mm")


if __name__ == "__main__":
    main()
