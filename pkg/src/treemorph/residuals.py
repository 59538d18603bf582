"""Residual evaluators with analytic Jacobians.

Each ``make_*`` factory closes over the measured data and returns a
:class:`~treemorph.solver.ResidualBlock`. Pose slots use the left
perturbation convention of :func:`treemorph.solver.pose_plus`.
"""
from __future__ import annotations

import numpy as np

from .geometry import Intrinsics, skew, rodrigues_exp
from .solver import ResidualBlock

__all__ = [
    "make_reprojection_block",
    "make_depth_block",
    "make_semantic_block",
    "make_relative_pose_block",
    "make_cylinder_point_block",
    "make_alignment_blocks",
    "left_jacobian_inverse",
    "relative_pose_residual",
]


def _rt(pose: np.ndarray):
    return rodrigues_exp(pose[:, :3]), pose[:, 3:6]


def _proj_jac(Xc: np.ndarray, fx: float, fy: float) -> np.ndarray:
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    return J


def _transform_jac(RX: np.ndarray, R: np.ndarray):
    """d(R X + t) w.r.t. (pose increment, X)."""
    Jp = np.zeros((len(RX), 3, 6))
    Jp[:, :, :3] = -skew(RX)
    Jp[:, :, 3:] = np.eye(3)
    return Jp, R


def make_reprojection_block(cam_idx, pt_idx, pixels, K: Intrinsics, *, loss=1.0, weight=1.0,
                            cam_group="cams", pt_group="points") -> ResidualBlock:
    """RGB reprojection error: observed pixel minus ``K [R|t] X``."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)

    def evaluate(vals, jac):
        pose, X = vals
        R, t = _rt(pose)
        RX = np.einsum("nij,nj->ni", R, X)
        Xc = RX + t
        z = Xc[:, 2]
        u = np.stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], axis=1)
        r = u - pixels
        if not jac:
            return r, None
        P = _proj_jac(Xc, K.fx, K.fy)
        Jp, JX = _transform_jac(RX, R)
        return r, [P @ Jp, P @ JX]

    return ResidualBlock((cam_group, pt_group), (cam_idx, pt_idx), 2, evaluate, loss, weight, "reprojection")


def make_depth_block(cam_idx, pt_idx, points_cam, K_i: Intrinsics, R_i, t_i, *, literal=True, loss=1.0,
                     weight=1.0, cam_group="cams", pt_group="points") -> ResidualBlock:
    """Infrared-camera 3D error between measured and predicted camera-frame points.

    ``literal=True`` compares the un-dehomogenized 3-vectors
    ``K_i [R_i|t_i] X`` (so the translation cancels); ``literal=False``
    compares pixel positions in the infrared image.
    """
    Xm = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    Ki = K_i.matrix
    R_i = np.asarray(R_i, dtype=float)
    t_i = np.asarray(t_i, dtype=float)
    M = Ki @ R_i
    if literal:
        meas = Xm @ M.T
    else:
        Xi = Xm @ R_i.T + t_i
        meas = np.stack([K_i.fx * Xi[:, 0] / Xi[:, 2] + K_i.cx, K_i.fy * Xi[:, 1] / Xi[:, 2] + K_i.cy], 1)

    def evaluate(vals, jac):
        pose, X = vals
        R, t = _rt(pose)
        RX = np.einsum("nij,nj->ni", R, X)
        Xc = RX + t
        if literal:
            r = meas - Xc @ M.T
            D = -np.broadcast_to(M, (len(X), 3, 3))
        else:
            Xi = Xc @ R_i.T + t_i
            pred = np.stack([K_i.fx * Xi[:, 0] / Xi[:, 2] + K_i.cx, K_i.fy * Xi[:, 1] / Xi[:, 2] + K_i.cy], 1)
            r = meas - pred
            D = -_proj_jac(Xi, K_i.fx, K_i.fy) @ R_i if jac else None
        if not jac:
            return r, None
        Jp, JX = _transform_jac(RX, R)
        return r, [D @ Jp, D @ JX]

    dim = 3 if literal else 2
    return ResidualBlock((cam_group, pt_group), (cam_idx, pt_idx), dim, evaluate, loss, weight, "depth")


def make_semantic_block(cam_idx, obj_idx, points_cam, shape, kind: str, *, loss=0.01, weight=1.0,
                        cam_group="cams", obj_group="objects") -> ResidualBlock:
    """Point-to-object residual for measured camera-frame points.

    The point is mapped into the object frame by ``[R_s|t_s][R_c|t_c]^-1``.
    ``kind='cylinder'``: signed distance to the radius-``shape`` cylinder
    about the object x-axis. ``kind='plane'``: signed excess outside the slab
    ``|z| <= shape``. ``weight`` is the multiplier of the squared residual.
    """
    Xm = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    shape = np.broadcast_to(np.asarray(shape, dtype=float), (len(Xm),))
    if kind not in ("cylinder", "plane"):
        raise ValueError(kind)

    def evaluate(vals, jac):
        cam, obj = vals
        Rc, tc = _rt(cam)
        Rs, ts = _rt(obj)
        d = Xm - tc
        Y = np.einsum("nji,nj->ni", Rc, d)  # Rc^T d
        RsY = np.einsum("nij,nj->ni", Rs, Y)
        Xo = RsY + ts
        N = len(Xm)
        g = np.zeros((N, 1, 3))
        if kind == "cylinder":
            rho = np.hypot(Xo[:, 1], Xo[:, 2])
            r = (rho - shape)[:, None]
            safe = np.maximum(rho, 1e-300)
            g[:, 0, 1] = Xo[:, 1] / safe
            g[:, 0, 2] = Xo[:, 2] / safe
        else:
            z = Xo[:, 2]
            r = np.where(z > shape, z - shape, np.where(z < -shape, z + shape, 0.0))[:, None]
            g[:, 0, 2] = (np.abs(z) > shape).astype(float)
        if not jac:
            return r, None
        RsRcT = Rs @ np.transpose(Rc, (0, 2, 1))
        Jc = np.zeros((N, 3, 6))
        Jc[:, :, :3] = RsRcT @ skew(d)
        Jc[:, :, 3:] = -RsRcT
        Js = np.zeros((N, 3, 6))
        Js[:, :, :3] = -skew(RsY)
        Js[:, :, 3:] = np.eye(3)
        return r, [g @ Jc, g @ Js]

    return ResidualBlock((cam_group, obj_group), (cam_idx, obj_idx), 1, evaluate, loss, weight, f"semantic-{kind}")


def left_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SO(3) for a stack of axis-angle vectors."""
    phi = np.atleast_2d(phi)
    th = np.linalg.norm(phi, axis=1)
    K = skew(phi)
    small = th < 1e-5
    ths = np.where(small, 1.0, th)
    c = np.where(small, 1.0 / 12.0, 1.0 / ths**2 - (1 + np.cos(ths)) / (2 * ths * np.sin(ths)))
    return np.eye(3) - 0.5 * K + c[:, None, None] * (K @ K)


def relative_pose_residual(Za: np.ndarray, Ta: np.ndarray, Tb: np.ndarray) -> np.ndarray:
    """Stacked (axis-angle, translation) of ``Z^-1 T_a T_b^-1`` for pose rows."""
    return _relpose(Za, Ta, Tb, False)[0]


def _relpose(Z, Ta, Tb, jac):
    from scipy.spatial.transform import Rotation

    ZR, Zt = _rt(Z)
    Ra, ta = _rt(Ta)
    Rb, tb = _rt(Tb)
    ZRt = np.transpose(ZR, (0, 2, 1))
    RaRbT = Ra @ np.transpose(Rb, (0, 2, 1))
    RE = ZRt @ RaRbT
    rho = Rotation.from_matrix(RE).as_rotvec()
    w = ta - np.einsum("nij,nj->ni", RaRbT, tb) - Zt
    tE = np.einsum("nij,nj->ni", ZRt, w)
    r = np.concatenate([rho, tE], axis=1)
    if not jac:
        return r, None
    N = len(r)
    Jl = left_jacobian_inverse(rho)
    Ja = np.zeros((N, 6, 6))
    Jb = np.zeros((N, 6, 6))
    Ja[:, :3, :3] = Jl @ ZRt
    Jb[:, :3, :3] = -Jl @ RE
    Ja[:, 3:, :3] = ZRt @ skew(np.einsum("nij,nj->ni", RaRbT, tb))
    Ja[:, 3:, 3:] = ZRt
    M = ZRt @ RaRbT
    Jb[:, 3:, :3] = -M @ skew(tb)
    Jb[:, 3:, 3:] = -M
    return r, [Ja, Jb]


def make_relative_pose_block(a_idx, b_idx, measurements, *, weight=1.0, loss=None, group="cams") -> ResidualBlock:
    """Pose-graph edge residual ``log(Z^-1 T_a T_b^-1)`` for world->frame poses.

    ``measurements`` are 6-vectors of ``Z = T_a T_b^-1`` (frame b -> frame a).
    """
    Z = np.asarray(measurements, dtype=float).reshape(-1, 6)

    def evaluate(vals, jac):
        return _relpose(Z, vals[0], vals[1], jac)

    return ResidualBlock((group, group), (a_idx, b_idx), 6, evaluate, loss, weight, "relative-pose")


def make_cylinder_point_block(points, obj_idx, rad_idx, *, weight=1.0, loss=None, obj_group="cylinders",
                              rad_group="radii") -> ResidualBlock:
    """Signed point-to-cylinder distance for world points; the object x-axis is the cylinder axis."""
    X = np.asarray(points, dtype=float).reshape(-1, 3)

    def evaluate(vals, jac):
        obj, rad = vals
        Rs, ts = _rt(obj)
        RX = np.einsum("nij,nj->ni", Rs, X)
        Xo = RX + ts
        rho = np.hypot(Xo[:, 1], Xo[:, 2])
        r = (rho - rad[:, 0])[:, None]
        if not jac:
            return r, None
        N = len(X)
        g = np.zeros((N, 1, 3))
        safe = np.maximum(rho, 1e-300)
        g[:, 0, 1] = Xo[:, 1] / safe
        g[:, 0, 2] = Xo[:, 2] / safe
        Jp, _ = _transform_jac(RX, Rs)
        return r, [g @ Jp, -np.ones((N, 1, 1))]

    return ResidualBlock((obj_group, rad_group), (obj_idx, rad_idx), 1, evaluate, loss, weight, "cylinder-point")


def make_alignment_blocks(cyl_pairs, plane_pairs, group="transform") -> list:
    """Residuals of the object-correspondence constraints for ``X_F = R X_B + t``.

    ``cyl_pairs``: list of ``(n_F, O_F, n_B, O_B)``; ``plane_pairs`` likewise.
    Returns blocks for: axis equality, plane-normal equality, cylinder origin
    on the corresponding axis line (cross product), plane origin on the
    corresponding plane (dot product).
    """
    blocks = []

    def direction_block(nF, nB, name):
        nF = np.asarray(nF, dtype=float).reshape(-1, 3)
        nB = np.asarray(nB, dtype=float).reshape(-1, 3)

        def evaluate(vals, jac):
            R, _ = _rt(vals[0])
            Rn = np.einsum("nij,nj->ni", R, nB)
            r = Rn - nF
            if not jac:
                return r, None
            J = np.zeros((len(r), 3, 6))
            J[:, :, :3] = -skew(Rn)
            return r, [J]

        return ResidualBlock((group,), (np.zeros(len(nF), int),), 3, evaluate, None, 1.0, name)

    if cyl_pairs:
        nF, OF, nB, OB = (np.array(x, dtype=float) for x in zip(*cyl_pairs))
        blocks.append(direction_block(nF, nB, "axis"))

        def ev_line(vals, jac):
            R, t = _rt(vals[0])
            RO = np.einsum("nij,nj->ni", R, OB)
            S = skew(nF)
            r = np.einsum("nij,nj->ni", S, RO + t - OF)
            if not jac:
                return r, None
            J = np.zeros((len(r), 3, 6))
            J[:, :, :3] = -S @ skew(RO)
            J[:, :, 3:] = S
            return r, [J]

        blocks.append(ResidualBlock((group,), (np.zeros(len(nF), int),), 3, ev_line, None, 1.0, "axis-line"))
    if plane_pairs:
        pF, QF, pB, QB = (np.array(x, dtype=float) for x in zip(*plane_pairs))
        blocks.append(direction_block(pF, pB, "normal"))

        def ev_plane(vals, jac):
            R, t = _rt(vals[0])
            RQ = np.einsum("nij,nj->ni", R, QB)
            r = np.einsum("ni,ni->n", pF, RQ + t - QF)[:, None]
            if not jac:
                return r, None
            J = np.zeros((len(r), 1, 6))
            J[:, 0, :3] = -np.einsum("ni,nij->nj", pF, skew(RQ))
            J[:, 0, 3:] = pF
            return r, [J]

        blocks.append(ResidualBlock((group,), (np.zeros(len(pF), int),), 1, ev_plane, None, 1.0, "plane-point"))
    return blocks
