"""Robust fitting of trunk cylinders and local ground planes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInput, DegenerateView, InsufficientData, MissingConstraint, NoModelFound
from .geometry import (
    Cylinder,
    ImageLine,
    Intrinsics,
    Plane,
    RigidTransform,
    canonical_line,
    frame_from_axis,
    point_cylinder_distance,
    rodrigues_exp,
)
from .residuals import make_cylinder_point_block
from .solver import ParameterGroup, ResidualBlock, lm_solve, ransac

__all__ = [
    "Silhouette",
    "TrunkAnnotation",
    "GroundAnnotation",
    "FittedObject",
    "fit_line_tls",
    "project_cylinder_silhouette",
    "silhouette_normals",
    "fit_cylinder_nine_point",
    "fit_trunk_cylinder",
    "fit_plane_ransac",
    "fit_ground_plane_with_prior",
    "ground_admissible",
    "fit_trunk_two_sided",
    "trunk_cost",
]

DEFAULT_LAMBDA = 1.0


@dataclass(frozen=True)
class Silhouette:
    """Two detected trunk boundary lines in one annotated frame, with that frame's pose."""

    pose: RigidTransform  # world -> camera
    K: Intrinsics
    lines: tuple  # (ImageLine, ImageLine)
    frame_id: int = -1
    anchor: tuple = (0.0, 0.0, 1.0)  # centre x, y and scale of the normalized frame lines are compared in


@dataclass
class TrunkAnnotation:
    object_id: int
    side: str
    frames: list = field(default_factory=list)  # dicts: frame_id, member_ids, lines [(a,b,c), (a,b,c)]

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a trunk annotation needs at least one frame")
        for f in self.frames:
            la, lb = (canonical_line(l) for l in f["lines"])
            if np.allclose(la, lb):
                raise ValueError("boundary lines must be distinct")


@dataclass
class GroundAnnotation:
    object_id: int
    side: str
    frame_id: int
    candidate_ids: np.ndarray
    trunk_id: int = -1  # trunk whose axis is the admissibility prior; -1 uses the mean trunk axis

    def __post_init__(self):
        self.candidate_ids = np.asarray(self.candidate_ids, dtype=np.int64)
        if len(self.candidate_ids) < 3:
            raise ValueError("ground annotation needs at least 3 candidate points")


@dataclass
class FittedObject:
    object_id: int
    kind: str  # cylinder | plane
    geometry: object
    support_ids: np.ndarray
    rms: float


def fit_line_tls(points2d) -> ImageLine:
    """Line minimizing squared perpendicular distances."""
    P = np.asarray(points2d, dtype=float).reshape(-1, 2)
    if len(P) < 2:
        raise DegenerateInput("need at least two points")
    c = P.mean(axis=0)
    _, s, Vt = np.linalg.svd(P - c, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(c).max()):
        raise DegenerateInput("all points coincide")
    n = Vt[-1]
    return ImageLine(np.array([n[0], n[1], -n @ c]))


def _tangent_normals(cyl_axis, cyl_origin, radius, pose: RigidTransform):
    """Unit normals (camera frame) of the two planes through the camera centre tangent to the cylinder."""
    a = pose.apply_direction(cyl_axis)
    o = pose.apply(cyl_origin)
    o_perp = o - (o @ a) * a
    d = np.linalg.norm(o_perp)
    if d <= radius or d < 1e-12:
        raise DegenerateView("camera inside the cylinder or on its axis")
    e1 = o_perp / d
    e2 = np.cross(a, e1)
    c = radius / d
    s = np.sqrt(1.0 - c * c)
    return c * e1 + s * e2, c * e1 - s * e2


def _u_at_centre_row(l: ImageLine, K: Intrinsics) -> float:
    a, b, c = l.coefficients
    if abs(a) < 1e-15:
        return -np.sign(b) * np.inf
    return -(b * K.cy + c) / a


def _order(lines_pix, K):
    la, lb = lines_pix
    return (la, lb) if _u_at_centre_row(la, K) <= _u_at_centre_row(lb, K) else (lb, la)


def project_cylinder_silhouette(c: Cylinder, pose: RigidTransform, K: Intrinsics) -> tuple:
    """Apparent-contour lines of cylinder ``c`` in the image of a camera at ``pose``.

    Returned left-to-right (by column where each line crosses the centre row).
    """
    n1, n2 = _tangent_normals(c.axis, c.origin, c.radius, pose)
    Kinv_T = np.linalg.inv(K.matrix).T
    l1 = ImageLine(Kinv_T @ n1)
    l2 = ImageLine(Kinv_T @ n2)
    return _order((l1, l2), K)


def _reanchor(L, anchor):
    """Express normalized lines ``(..., 3)`` in the frame ``x' = (x - centre) / scale``."""
    L = np.array(L, dtype=float)
    L[..., 2] += L[..., 0] * anchor[..., 0] + L[..., 1] * anchor[..., 1]
    L[..., :2] *= anchor[..., 2:3]
    return L


def silhouette_normals(lines: Sequence[ImageLine], K: Intrinsics, anchor=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Lines as canonical unit vectors, left-to-right, shape (2, 3).

    Lines are taken to normalized camera coordinates and then to the frame
    centred on ``anchor[:2]`` and scaled by ``anchor[2]``. Centring and scaling
    on the annotated trunk region makes the vector difference weigh line
    offsets where the trunk is seen, rather than at the principal point.
    """
    L = np.stack([K.matrix.T @ l.coefficients for l in lines])
    return _order_anchored(canonical_line(_reanchor(L, np.asarray(anchor, dtype=float))))


def _order_anchored(L):
    """Sort a (2, 3) or (N, 2, 3) line pair left-to-right by where each crosses the anchor row."""
    with np.errstate(invalid="ignore", divide="ignore"):
        x = np.where(np.abs(L[..., 0]) < 1e-15, -np.sign(L[..., 1]) * np.inf, -L[..., 2] / L[..., 0])
    swap = x[..., 1] < x[..., 0]
    return np.where(swap[..., None, None], L[..., ::-1, :], L)


def _predicted_normals(axis, origin, radius, sil: Silhouette) -> np.ndarray:
    n1, n2 = _tangent_normals(axis, origin, radius, sil.pose)
    Kinv_T = np.linalg.inv(sil.K.matrix).T
    pix = (ImageLine(Kinv_T @ n1), ImageLine(Kinv_T @ n2))
    return silhouette_normals(pix, sil.K, sil.anchor)


# -- minimal solver ------------------------------------------------------------


def _quadric_rows(P):
    x, y, z = P.T
    return np.stack([x * x, y * y, z * z, x * y, x * z, y * z, x, y, z, np.ones_like(x)], axis=1)


def _circle_fit(Q2):
    """Algebraic circle fit in 2D; returns centre, radius."""
    A = np.c_[2 * Q2, np.ones(len(Q2))]
    b = (Q2**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = sol[:2]
    r2 = sol[2] + c @ c
    if r2 <= 0:
        return None
    return c, np.sqrt(r2)


def fit_cylinder_nine_point(points, polish: bool = True) -> Optional[Cylinder]:
    """Cylinder through (at least) nine points via a general quadric fit.

    The axis is the eigenvector of the quadric's second-order part with the
    smallest magnitude eigenvalue; centre and radius come from a circle fit in
    the orthogonal plane, followed by a short LM polish. Returns ``None`` for
    samples that do not determine a cylinder.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 9:
        return None
    mu = P.mean(axis=0)
    scale = np.abs(P - mu).max()
    if scale <= 0:
        return None
    Q = (P - mu) / scale
    q = np.linalg.svd(_quadric_rows(Q))[2][-1]
    A = np.array([[q[0], q[3] / 2, q[4] / 2], [q[3] / 2, q[1], q[5] / 2], [q[4] / 2, q[5] / 2, q[2]]])
    w, V = np.linalg.eigh(A)
    k = int(np.argmin(np.abs(w)))
    others = np.delete(w, k)
    if others[0] * others[1] <= 0:
        return None
    axis = V[:, k]
    B = frame_from_axis(axis, np.zeros(3), along=0).rotation
    Q2 = (Q @ B.T)[:, 1:]
    fit = _circle_fit(Q2)
    if fit is None:
        return None
    c2, r = fit
    origin = mu + scale * (B[1] * c2[0] + B[2] * c2[1])
    try:
        cyl = Cylinder(axis, origin, r * scale)
    except ValueError:
        return None
    if polish:
        cyl = _polish(P, cyl)
    return cyl.regauged(P) if cyl is not None else None


def _cyl_params(cyl: Cylinder):
    T = frame_from_axis(cyl.axis, cyl.origin, along=0)
    pose = ParameterGroup(T.as_vector()[None], "pose", frozen=np.array([[True, False, False, True, False, False]]))
    return pose, ParameterGroup([[cyl.radius]])


def _cyl_from_params(pose_row, radius, height=1.0) -> Cylinder:
    T = RigidTransform.from_vector(pose_row)
    axis = T.rotation[0]
    origin = -T.rotation.T @ T.translation
    return Cylinder(axis, origin, float(radius), height)


def _polish(P, cyl, iters=10):
    pose, rad = _cyl_params(cyl)
    blk = make_cylinder_point_block(P, np.zeros(len(P), int), np.zeros(len(P), int))
    try:
        out, rep = lm_solve([blk], {"cylinders": pose, "radii": rad}, max_iterations=iters)
    except Exception:
        return cyl
    r = out["radii"].values[0, 0]
    if not np.isfinite(r) or r <= 0:
        return None
    return _cyl_from_params(out["cylinders"].values[0], abs(r))


# -- silhouette residual -------------------------------------------------------


def _predicted_batch(poses, radii, Rc, tc, anchors=None) -> np.ndarray:
    """Predicted normalized boundary lines, (N, 6), for cylinder parameter rows seen by cameras ``Rc, tc``.

    In normalized coordinates a boundary line equals the normal of its
    tangent plane through the camera centre. NaN marks cameras inside the
    cylinder.
    """
    Ro = rodrigues_exp(poses[:, :3])
    axis = Ro[:, 0, :]
    origin = -np.einsum("nji,nj->ni", Ro, poses[:, 3:])
    a = np.einsum("nij,nj->ni", Rc, axis)
    o = np.einsum("nij,nj->ni", Rc, origin) + tc
    o_perp = o - np.einsum("ni,ni->n", o, a)[:, None] * a
    d = np.linalg.norm(o_perp, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        e1 = o_perp / d[:, None]
        e2 = np.cross(a, e1)
        c = radii / d
        sn = np.sqrt(1.0 - c * c)
    n1 = c[:, None] * e1 + sn[:, None] * e2
    n2 = c[:, None] * e1 - sn[:, None] * e2
    bad = ~np.isfinite(sn)
    n1[bad] = np.nan
    n2[bad] = np.nan
    L = np.stack([n1, n2], axis=1)
    if anchors is not None:
        L = _reanchor(L, anchors[:, None, :])
    with np.errstate(invalid="ignore"):
        L = _order_anchored(canonical_line(L))
    return L.reshape(-1, 6)


def _silhouette_block(sils: Sequence[Silhouette], obj_row: int, weight: float) -> ResidualBlock:
    obs = np.stack([silhouette_normals(s.lines, s.K, s.anchor).ravel() for s in sils])
    Rc = np.stack([s.pose.rotation for s in sils])
    tc = np.stack([s.pose.translation for s in sils])
    anc = np.array([s.anchor for s in sils], dtype=float)
    h = 1e-7

    def evaluate(vals, jac):
        poses, rads = vals
        r = _predicted_batch(poses, rads[:, 0], Rc, tc, anc) - obs
        if not jac:
            return r, None
        from .solver import pose_plus

        N = len(sils)
        Jp = np.zeros((N, 6, 6))
        for j in range(6):
            d = np.zeros((N, 6))
            d[:, j] = h
            rp = _predicted_batch(pose_plus(poses, d), rads[:, 0], Rc, tc, anc)
            rm = _predicted_batch(pose_plus(poses, -d), rads[:, 0], Rc, tc, anc)
            Jp[:, :, j] = (rp - rm) / (2 * h)
        rp = _predicted_batch(poses, rads[:, 0] + h, Rc, tc, anc)
        rm = _predicted_batch(poses, rads[:, 0] - h, Rc, tc, anc)
        return r, [Jp, ((rp - rm) / (2 * h))[:, :, None]]

    idx = np.full(len(sils), obj_row)
    return ResidualBlock(("cylinders", "radii"), (idx, np.zeros(len(sils), int)), 6, evaluate, None, weight,
                         "silhouette")


def trunk_cost(points, cyl: Cylinder, sils: Sequence[Silhouette] = (), lam: float = 0.0) -> float:
    """Sum of squared point-to-surface distances plus ``lam`` times the silhouette term."""
    c = float((point_cylinder_distance(points, cyl) ** 2).sum())
    for s in sils:
        pred = _predicted_normals(cyl.axis, cyl.origin, cyl.radius, s)
        c += lam * float(((pred - silhouette_normals(s.lines, s.K, s.anchor)) ** 2).sum())
    return c


def _height_and_gauge(P, cyl: Cylinder) -> Cylinder:
    cyl = cyl.regauged(P)
    s = (P - cyl.origin) @ cyl.axis
    return Cylinder(cyl.axis, cyl.origin, cyl.radius, max(float(s.max() - s.min()), 1e-9))


def fit_trunk_cylinder(points, silhouettes: Sequence[Silhouette] = (), lam: float = DEFAULT_LAMBDA, seed: int = 0,
                       *, inlier_threshold: float = 0.01, max_iters: int = 300, radius_range=(0.005, 0.5),
                       return_inliers: bool = False):
    """Fit a trunk cylinder to 3D points with optional silhouette-line constraints.

    RANSAC over nine-point hypotheses picks the inliers; LM then minimizes the
    point-distance term plus ``lam`` times the squared differences between
    predicted and detected boundary lines. The returned cylinder's origin is
    the axis point nearest the inlier centroid and its height spans the
    inliers along the axis.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 9:
        raise InsufficientData("cylinder fitting needs at least 9 points")
    if lam > 0 and not silhouettes:
        raise MissingConstraint("lambda > 0 requires boundary lines")
    lo, hi = radius_range
    model, mask = ransac(
        P,
        fit_cylinder_nine_point,
        lambda c, X: point_cylinder_distance(X, c),
        sample_size=9,
        seed=seed,
        max_iters=max_iters,
        inlier_threshold=inlier_threshold,
        degeneracy_check=lambda c, X, r: lo <= c.radius <= hi,
        confidence=0.999,
    )
    inl = P[mask]
    cyl = _refine_cylinders([inl], [model], [list(silhouettes) if lam > 0 else []], lam, shared_radius=False)[0]
    cyl = _height_and_gauge(inl, cyl)
    return (cyl, mask) if return_inliers else cyl


def _refine_cylinders(point_sets, inits, sil_sets, lam, shared_radius):
    rows = []
    frozen = []
    for c in inits:
        T = frame_from_axis(c.axis, c.origin, along=0)
        rows.append(T.as_vector())
        frozen.append([True, False, False, True, False, False])
    if shared_radius:
        radii = np.array([[np.mean([c.radius for c in inits])]])
    else:
        radii = np.array([[c.radius] for c in inits])
    params = {
        "cylinders": ParameterGroup(np.array(rows), "pose", frozen=np.array(frozen)),
        "radii": ParameterGroup(radii),
    }
    blocks = []
    for k, (P, sils) in enumerate(zip(point_sets, sil_sets)):
        ridx = 0 if shared_radius else k
        blocks.append(make_cylinder_point_block(P, np.full(len(P), k), np.full(len(P), ridx)))
        if lam > 0 and sils:
            blk = _silhouette_block(sils, k, lam)
            blk.indices = (blk.indices[0], np.full(len(sils), ridx))
            blocks.append(blk)
    out, _ = lm_solve(blocks, params)
    cyls = []
    for k in range(len(inits)):
        r = out["radii"].values[0 if shared_radius else k, 0]
        cyls.append(_cyl_from_params(out["cylinders"].values[k], abs(r), inits[k].height))
    return cyls


def fit_trunk_two_sided(front_points, back_points, silhouettes: Sequence[Silhouette] = (),
                        lam: float = DEFAULT_LAMBDA, *, front_init: Optional[Cylinder] = None,
                        back_init: Optional[Cylinder] = None, seed: int = 0):
    """Joint fit of the two half-trunks with one shared radius.

    ``silhouettes`` carry poses in the same (merged) frame as the points and a
    ``side`` is inferred per silhouette from ``frame_id`` membership: pass
    ``(front_silhouettes, back_silhouettes)`` as a 2-tuple of lists.
    Returns ``(cyl_front, cyl_back, diameter)``.
    """
    F = np.asarray(front_points, dtype=float).reshape(-1, 3)
    B = np.asarray(back_points, dtype=float).reshape(-1, 3)
    if len(F) == 0 or len(B) == 0:
        raise InsufficientData("both sides need trunk points")
    if len(silhouettes) == 2 and all(isinstance(s, (list, tuple)) for s in silhouettes):
        sil_f, sil_b = list(silhouettes[0]), list(silhouettes[1])
    else:
        sil_f, sil_b = list(silhouettes), []
    if lam > 0 and not (sil_f or sil_b):
        raise MissingConstraint("lambda > 0 requires boundary lines")
    if front_init is None:
        front_init = fit_trunk_cylinder(F, sil_f, lam if sil_f else 0.0, seed)
    if back_init is None:
        back_init = fit_trunk_cylinder(B, sil_b, lam if sil_b else 0.0, seed + 1)
    cf, cb = _refine_cylinders([F, B], [front_init, back_init], [sil_f, sil_b], lam, shared_radius=True)
    cf = _height_and_gauge(F, cf)
    cb = _height_and_gauge(B, cb)
    return cf, cb, 2.0 * cf.radius


# -- planes ----------------------------------------------------------------------


def _plane_from_three(S, prior=None) -> Optional[Plane]:
    n = np.cross(S[1] - S[0], S[2] - S[0])
    nn = np.linalg.norm(n)
    if nn < 1e-12 * max(1.0, np.abs(S).max()) ** 2:
        return None
    n = n / nn
    if prior is not None and n @ prior < 0:
        n = -n
    return Plane(n, S.mean(axis=0))


def _tls_plane(P, prior=None, t_s=0.05) -> Plane:
    c = P.mean(axis=0)
    _, _, Vt = np.linalg.svd(P - c, full_matrices=False)
    n = Vt[-1]
    if prior is not None and n @ prior < 0:
        n = -n
    return Plane(n, c, t_s)


def fit_plane_ransac(points, t_s: float = 0.05, seed: int = 0, max_iters: int = 1000) -> Plane:
    """Plain RANSAC plane (largest slab consensus), refined by TLS on inliers."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    model, mask = ransac(P, _plane_from_three, lambda pl, X: np.abs(pl.signed_distance(X)), sample_size=3,
                         seed=seed, max_iters=max_iters, inlier_threshold=t_s)
    return _tls_plane(P[mask], model.normal, t_s)


def ground_admissible(plane: Plane, points, prior_axis, t_s: float, theta_max_deg: float = 30.0,
                      boundary_eps: float = 0.02) -> bool:
    """Normal within ``theta_max`` of the prior and (almost) no points below the slab."""
    prior = np.asarray(prior_axis, dtype=float)
    cosang = float(np.clip(plane.normal @ prior / np.linalg.norm(prior), -1, 1))
    if np.degrees(np.arccos(cosang)) > theta_max_deg:
        return False
    below = plane.signed_distance(points) < -t_s
    return float(below.mean()) <= boundary_eps


def fit_ground_plane_with_prior(points, prior_axis, t_s: float = 0.05, seed: int = 0, *,
                                theta_max_deg: float = 30.0, boundary_eps: float = 0.02,
                                max_iters: int = 3000) -> Plane:
    """Local ground plane with the trunk axis as an admissibility prior.

    A hypothesis survives only if its normal is within ``theta_max_deg`` of
    ``prior_axis`` and at most ``boundary_eps`` of all points lie more than
    ``t_s`` below it, i.e. the plane bounds the cloud from below.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise InsufficientData("need at least 3 points")
    prior = np.asarray(prior_axis, dtype=float)
    prior = prior / np.linalg.norm(prior)

    def admissible(pl, X, res):
        return ground_admissible(pl, X, prior, t_s, theta_max_deg, boundary_eps)

    model, mask = ransac(P, lambda S: _plane_from_three(S, prior), lambda pl, X: np.abs(pl.signed_distance(X)),
                         sample_size=3, seed=seed, max_iters=max_iters, inlier_threshold=t_s,
                         degeneracy_check=admissible, confidence=0.9999)
    refined = _tls_plane(P[mask], prior, t_s)
    if ground_admissible(refined, P, prior, t_s, theta_max_deg, boundary_eps):
        return refined
    return Plane(model.normal, model.origin, t_s)
