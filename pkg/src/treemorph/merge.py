"""Two-side alignment from object correspondences and semantic bundle adjustment."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateConfiguration, GeometryError, InsufficientData, OneSidedObjectWarning
from .geometry import Cylinder, ImageLine, Plane, RigidTransform, frame_from_axis, nearest_rotation, rodrigues_exp
from .recon import ReconConfig, ReconstructionSide, ba_blocks
from .residuals import make_alignment_blocks, make_semantic_block
from .semantics import (
    DEFAULT_LAMBDA,
    FittedObject,
    GroundAnnotation,
    Silhouette,
    TrunkAnnotation,
    fit_ground_plane_with_prior,
    fit_trunk_cylinder,
    fit_trunk_two_sided,
)
from .solver import ParameterGroup, SolveReport, lm_solve, total_cost

log = logging.getLogger(__name__)

__all__ = [
    "ObjectCorrespondence",
    "SemanticObjectState",
    "MergeConfig",
    "MergedModel",
    "up_direction",
    "trunk_points",
    "trunk_silhouettes",
    "fit_side_objects",
    "solve_initial_transform",
    "assemble_system",
    "alignment_cost",
    "refine_transform",
    "semantic_bundle_adjust",
    "semantic_cost",
    "trunk_offsets",
    "merge_sides",
]


@dataclass(frozen=True)
class ObjectCorrespondence:
    front_object_id: int
    back_object_id: int
    kind: str  # cylinder | plane

    def __post_init__(self):
        if self.kind not in ("cylinder", "plane"):
            raise ValueError(f"unknown object kind {self.kind!r}")


@dataclass
class SemanticObjectState:
    object_id: int
    kind: str
    pose: np.ndarray  # 6-vector world -> object
    shape: float  # radius or slab half-width
    members: dict  # side -> dense point ids

    def geometry(self):
        T = RigidTransform.from_vector(self.pose).inverse()
        if self.kind == "cylinder":
            return Cylinder(T.rotation[:, 0], T.translation, self.shape)
        return Plane(T.rotation[:, 2], T.translation, self.shape)


@dataclass
class MergeConfig:
    lam: float = DEFAULT_LAMBDA  # silhouette weight in trunk fitting
    lambda_s: float = 1.0
    semantic_normalization: str = "per-residual"  # or per-object
    semantic_unit_scale: Optional[float] = None  # None: infrared focal length, matching the 3D feature term
    semantic_huber: float = 1.0
    t_s: float = 0.05
    theta_max_deg: float = 30.0
    boundary_eps: float = 0.02
    sba_iterations: int = 30
    min_members: int = 10
    seed: int = 0
    recon: ReconConfig = field(default_factory=ReconConfig)

    def __post_init__(self):
        if self.semantic_normalization not in ("per-residual", "per-object"):
            raise ValueError("semantic_normalization must be per-residual or per-object")
        if self.lambda_s < 0 or self.lam < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class MergedModel:
    front: ReconstructionSide
    back: ReconstructionSide  # poses and landmarks expressed in the front frame
    T_FB: RigidTransform
    objects: list  # SemanticObjectState
    trunks: dict  # side -> list[TrunkAnnotation]
    grounds: dict  # side -> list[GroundAnnotation]
    correspondences: list
    stage_transforms: dict = field(default_factory=dict)
    stage_metrics: list = field(default_factory=list)  # (stage, tree object id, offset m)
    reports: dict = field(default_factory=dict)
    trunk_fits: dict = field(default_factory=dict)  # front trunk id -> (front cyl, back cyl, diameter)

    def points(self):
        """Dense points in the front frame with provenance: ``(X, side, label, tree, dense_id)``."""
        out = []
        for tag, s in (("front", self.front), ("back", self.back)):
            X = s.dense_world()
            n = len(X)
            out.append((X, np.full(n, 0 if tag == "front" else 1), s.dense.label, s.dense.tree, np.arange(n)))
        return tuple(np.concatenate(c) for c in zip(*out))

    def object(self, object_id: int, kind: Optional[str] = None) -> SemanticObjectState:
        for o in self.objects:
            if o.object_id == object_id and (kind is None or o.kind == kind):
                return o
        raise KeyError(object_id)


# -- per-side object fitting --------------------------------------------------------------


def up_direction(side: ReconstructionSide) -> np.ndarray:
    """Mean camera 'up' (-y) direction in the side world frame."""
    R = rodrigues_exp(side.poses[:, :3])
    up = -R[:, 1, :].mean(axis=0)
    return up / np.linalg.norm(up)


def trunk_points(side: ReconstructionSide, ann: TrunkAnnotation) -> np.ndarray:
    ids = np.concatenate([np.asarray(f["member_ids"], dtype=np.int64) for f in ann.frames])
    return side.dense_world(ids)


def trunk_silhouettes(side: ReconstructionSide, ann: TrunkAnnotation) -> list:
    """Boundary lines per annotated frame.

    Lines are compared in coordinates centred on the projected member points
    and scaled by their RMS spread.
    """
    out = []
    for f in ann.frames:
        pose = side.pose(f["frame_id"])
        Xc = pose.apply(side.dense_world(np.asarray(f["member_ids"], dtype=np.int64)))
        x = Xc[Xc[:, 2] > 0]
        x = x[:, :2] / x[:, 2:]
        anchor = (0.0, 0.0, 1.0)
        if len(x) >= 2:
            c = x.mean(axis=0)
            spread = float(np.sqrt(np.mean(np.sum((x - c) ** 2, axis=1)) / 2))
            if spread > 0:
                anchor = (float(c[0]), float(c[1]), spread)
        out.append(Silhouette(pose, side.rig.K_o, tuple(ImageLine(l) for l in f["lines"]), f["frame_id"], anchor))
    return out


def _orient(v, up):
    return v if v @ up >= 0 else -v


def fit_side_objects(side: ReconstructionSide, trunks: Sequence[TrunkAnnotation], grounds: Sequence[GroundAnnotation],
                     cfg: MergeConfig = None) -> dict:
    """Fit every annotated trunk cylinder and ground plane in the side frame; keyed by ``(kind, id)``."""
    cfg = cfg or MergeConfig()
    up = up_direction(side)
    out = {}
    for k, ann in enumerate(trunks):
        P = trunk_points(side, ann)
        sils = trunk_silhouettes(side, ann) if cfg.lam > 0 else []
        cyl, mask = fit_trunk_cylinder(P, sils, cfg.lam if sils else 0.0, cfg.seed + k, return_inliers=True)
        cyl = Cylinder(_orient(cyl.axis, up), cyl.origin, cyl.radius, cyl.height)
        rms = float(np.sqrt(np.mean(cyl.axis_distance(P[mask]) ** 2 - 0)) if mask.any() else np.nan)
        out[("cylinder", ann.object_id)] = FittedObject(ann.object_id, "cylinder", cyl, np.nonzero(mask)[0], rms)
    axes = [o.geometry.axis for o in out.values()]
    mean_axis = _orient(np.mean(axes, axis=0), up) if axes else up
    for k, ann in enumerate(grounds):
        prior = mean_axis
        if ("cylinder", ann.trunk_id) in out:
            prior = out[("cylinder", ann.trunk_id)].geometry.axis
        P = side.dense_world(ann.candidate_ids)
        pl = fit_ground_plane_with_prior(P, prior, cfg.t_s, cfg.seed + k, theta_max_deg=cfg.theta_max_deg,
                                         boundary_eps=cfg.boundary_eps)
        inl = np.nonzero(np.abs(pl.signed_distance(P)) <= cfg.t_s)[0]
        rms = float(np.sqrt(np.mean(pl.signed_distance(P[inl]) ** 2))) if len(inl) else np.nan
        out[("plane", ann.object_id)] = FittedObject(ann.object_id, "plane", pl, ann.candidate_ids[inl], rms)
    return out


# -- initial transform ----------------------------------------------------------------------


def _pairs(corr: Sequence[ObjectCorrespondence], objs_f: dict, objs_b: dict):
    cyl, pln = [], []
    for c in corr:
        kf, kb = (c.kind, c.front_object_id), (c.kind, c.back_object_id)
        if kf not in objs_f or kb not in objs_b:
            raise InsufficientData(f"correspondence {c} references an unfitted object")
        gf = objs_f[kf].geometry if isinstance(objs_f[kf], FittedObject) else objs_f[kf]
        gb = objs_b[kb].geometry if isinstance(objs_b[kb], FittedObject) else objs_b[kb]
        if c.kind == "cylinder":
            cyl.append((gf.axis, gf.origin, gb.axis, gb.origin))
        else:
            pln.append((gf.normal, gf.origin, gb.normal, gb.origin))
    return cyl, pln


def _rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit ``a`` to unit ``b``."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    s, c = np.linalg.norm(v), float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        h = np.eye(3)[int(np.argmin(np.abs(a)))]
        v = np.cross(a, h)
        v /= np.linalg.norm(v)
        return rodrigues_exp(np.pi * v)
    return rodrigues_exp(v / s * np.arctan2(s, c))


def _consistent_signs(cyl, pln):
    """Flip back-side directions to agree with their front counterparts after a normal-based rough alignment."""
    if pln:
        nF = np.mean([p[0] for p in pln], axis=0)
        nB = np.mean([p[2] for p in pln], axis=0)
        R0 = _rotation_between(nB, nF)
    else:
        R0 = np.eye(3)
    fix = lambda pairs: [(a, o, b if (R0 @ b) @ a >= 0 else -b, q) for a, o, b, q in pairs]
    return fix(cyl), fix(pln)


def _axis_plane_point(axis, origin, normal, q):
    return origin + axis * ((q - origin) @ normal) / (axis @ normal)


def _derived_directions(cyl, pln, min_incidence=0.3):
    """Direction pairs implied by the correspondences that any rotation must also map.

    Axis/plane intersections are rigidly attached to the objects, so their
    differences are direction pairs; cross products of direction pairs are too.
    Without these rows near-parallel trunks leave one column of ``R`` nearly free.
    """
    dirs = [(a, b) for a, _, b, _ in cyl] + [(a, b) for a, _, b, _ in pln]
    extra = []
    if pln:
        nF, QF, nB, QB = pln[0]
        pts = [(_axis_plane_point(a, o, nF, QF), _axis_plane_point(b, q, nB, QB))
               for a, o, b, q in cyl if min(abs(a @ nF), abs(b @ nB)) > min_incidence]
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                extra.append((pts[j][0] - pts[i][0], pts[j][1] - pts[i][1]))
    base = dirs + extra
    for i in range(len(base)):
        for j in range(i + 1, len(base)):
            extra.append((np.cross(base[i][0], base[j][0]), np.cross(base[i][1], base[j][1])))
    return extra


def assemble_system(cyl, pln):
    """Stack the linear correspondence constraints as ``A x = b`` with ``x = (vec_row(R), t)``."""
    rows, rhs = [], []

    def rot_rows(v):
        # R v as a linear map of vec_row(R)
        M = np.zeros((3, 12))
        for i in range(3):
            M[i, 3 * i:3 * i + 3] = v
        return M

    for nF, OF, nB, OB in cyl:
        rows.append(rot_rows(nB))
        rhs.append(nF)
    for nF, QF, nB, QB in pln:
        rows.append(rot_rows(nB))
        rhs.append(nF)
    for dF, dB in _derived_directions(cyl, pln):
        rows.append(rot_rows(dB))
        rhs.append(dF)
    for nF, OF, nB, OB in cyl:
        P = np.eye(3) - np.outer(nF, nF)
        M = rot_rows(OB)
        M[:, 9:] = np.eye(3)
        rows.append(P @ M)
        rhs.append(P @ OF)
    for nF, QF, nB, QB in pln:
        M = rot_rows(QB)
        M[:, 9:] = np.eye(3)
        rows.append(nF[None, :] @ M)
        rhs.append(np.atleast_1d(nF @ QF))
    return np.vstack(rows), np.concatenate(rhs)


def solve_initial_transform(corr: Sequence[ObjectCorrespondence], objs_f: dict, objs_b: dict,
                            rank_tol: float = 1e-9) -> RigidTransform:
    """Closed-form ``^F_B T`` from corresponding cylinders and planes.

    Least-squares solution of the stacked linear system, rotation block
    projected onto SO(3), translation re-solved with the rotation held fixed.
    """
    cyl, pln = _pairs(corr, objs_f, objs_b)
    if len(cyl) < 2 or len(pln) < 1:
        raise DegenerateConfiguration("need at least two cylinder and one plane correspondences")
    cyl, pln = _consistent_signs(cyl, pln)
    # centring keeps the rotation unknowns well conditioned; t is recovered from the shifted translation
    cF = np.mean([o for _, o, _, _ in cyl + pln], axis=0)
    cB = np.mean([o for _, _, _, o in cyl + pln], axis=0)
    cyl = [(a, o - cF, b, q - cB) for a, o, b, q in cyl]
    pln = [(a, o - cF, b, q - cB) for a, o, b, q in pln]
    A, b = assemble_system(cyl, pln)
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= rank_tol * s[0]:
        raise DegenerateConfiguration("correspondences do not constrain the transform")
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    R = nearest_rotation(x[:9].reshape(3, 3))
    t = np.linalg.lstsq(A[:, 9:], b - A[:, :9] @ R.ravel(), rcond=None)[0]
    return RigidTransform(R, t + cF - R @ cB)


def alignment_cost(corr, objs_f, objs_b, T: RigidTransform) -> float:
    cyl, pln = _consistent_signs(*_pairs(corr, objs_f, objs_b))
    blocks = make_alignment_blocks(cyl, pln)
    return total_cost(blocks, {"transform": ParameterGroup(T.as_vector()[None], "pose")})


def refine_transform(corr, objs_f, objs_b, T_init: RigidTransform) -> tuple[RigidTransform, SolveReport]:
    """LM over the correspondence residuals starting from ``T_init``."""
    cyl, pln = _consistent_signs(*_pairs(corr, objs_f, objs_b))
    blocks = make_alignment_blocks(cyl, pln)
    params = {"transform": ParameterGroup(T_init.as_vector()[None], "pose")}
    out, rep = lm_solve(blocks, params)
    return RigidTransform.from_vector(out["transform"].values[0]), rep


# -- semantic bundle adjustment -------------------------------------------------------------


_CYL_FROZEN = [True, False, False, True, False, False]
_PLANE_FROZEN = [False, False, True, True, True, False]


def _unit_scale(model: MergedModel, cfg: MergeConfig) -> float:
    return cfg.semantic_unit_scale if cfg.semantic_unit_scale is not None else model.front.rig.K_i.fx


def _problem(model: MergedModel, cfg: MergeConfig, lambda_s: float):
    F, B = model.front, model.back
    nF = F.n_frames
    mF = len(F.landmarks)
    poses = np.vstack([F.poses, B.poses])
    const = np.zeros(len(poses), bool)
    const[0] = True
    params = {"cams": ParameterGroup(poses, "pose", constant=const),
              "points": ParameterGroup(np.vstack([F.landmarks, B.landmarks]))}
    blocks = []
    for side, f_off, l_off in ((F, 0, 0), (B, nF, mF)):
        fmap = np.arange(side.n_frames) + f_off
        lmap = np.arange(len(side.landmarks)) + l_off
        blocks += ba_blocks(side, np.ones(len(side.obs_frame), bool), fmap, lmap, cfg.recon)
    if lambda_s > 0 and model.objects:
        rows, frozen = [], []
        for o in model.objects:
            rows.append(o.pose)
            frozen.append(_CYL_FROZEN if o.kind == "cylinder" else _PLANE_FROZEN)
        params["objects"] = ParameterGroup(np.array(rows), "pose", frozen=np.array(frozen))
        scale = _unit_scale(model, cfg)
        for k, o in enumerate(model.objects):
            n_members = sum(len(v) for v in o.members.values())
            lam = lambda_s / n_members if cfg.semantic_normalization == "per-object" else lambda_s
            for side, f_off, tag in ((F, 0, "front"), (B, nF, "back")):
                ids = np.asarray(o.members.get(tag, []), dtype=np.int64)
                if len(ids) == 0:
                    continue
                blocks.append(make_semantic_block(side.dense.frame[ids] + f_off, np.full(len(ids), k),
                                                  side.dense.point_cam[ids], o.shape, o.kind,
                                                  loss=cfg.semantic_huber, weight=(lam * scale) ** 2))
    return params, blocks


def semantic_cost(model: MergedModel, cfg: MergeConfig = None, lambda_s: Optional[float] = None) -> float:
    """Total cost J' (feature terms plus weighted semantic terms) at the model's current state."""
    cfg = cfg or MergeConfig()
    params, blocks = _problem(model, cfg, cfg.lambda_s if lambda_s is None else lambda_s)
    return total_cost(blocks, params)


def semantic_bundle_adjust(model: MergedModel, lambda_s: Optional[float] = None, cfg: MergeConfig = None,
                           max_iterations: Optional[int] = None) -> SolveReport:
    """Jointly refine all camera poses, landmarks and object poses; shapes stay fixed.

    The first front frame is held constant. Updates ``model`` in place.
    """
    cfg = cfg or MergeConfig()
    lambda_s = cfg.lambda_s if lambda_s is None else lambda_s
    for o in model.objects:
        sides = [s for s, v in o.members.items() if len(v)]
        n = sum(len(v) for v in o.members.values())
        if n < cfg.min_members:
            raise InsufficientData(f"object {o.object_id} has only {n} member observations")
        if len(sides) < 2:
            warnings.warn(f"object {o.kind} {o.object_id} has members on one side only", OneSidedObjectWarning,
                          stacklevel=2)
    params, blocks = _problem(model, cfg, lambda_s)
    its = cfg.sba_iterations if max_iterations is None else max_iterations
    out, rep = lm_solve(blocks, params, max_iterations=its, eliminate="points",
                        function_tolerance=cfg.recon.ba_function_tolerance)
    nF = model.front.n_frames
    mF = len(model.front.landmarks)
    model.front.poses[:] = out["cams"].values[:nF]
    model.back.poses[:] = out["cams"].values[nF:]
    model.front.landmarks[:] = out["points"].values[:mF]
    model.back.landmarks[:] = out["points"].values[mF:]
    if "objects" in out:
        for o, row in zip(model.objects, out["objects"].values):
            o.pose = row.copy()
    return rep


# -- staged merge ------------------------------------------------------------------------------


def _annotation_map(anns):
    return {a.object_id: a for a in anns}


def trunk_offsets(model: MergedModel, cfg: MergeConfig = None, inits: Optional[dict] = None) -> dict:
    """Lateral offset between the front and back trunk axes per cylinder correspondence.

    Each side's half-trunk is fitted with a shared radius; the offset is the
    distance of the back axis from the front axis at the mid-height of the
    front member points, measured perpendicular to the front axis. The fits
    are stored in ``model.trunk_fits``. ``inits`` maps front trunk ids to
    ``(front, back)`` starting cylinders and skips the RANSAC stage.
    """
    cfg = cfg or MergeConfig()
    tf = _annotation_map(model.trunks["front"])
    tb = _annotation_map(model.trunks["back"])
    out = {}
    for c in model.correspondences:
        if c.kind != "cylinder":
            continue
        af, ab = tf[c.front_object_id], tb[c.back_object_id]
        PF, PB = trunk_points(model.front, af), trunk_points(model.back, ab)
        sils = (trunk_silhouettes(model.front, af), trunk_silhouettes(model.back, ab)) if cfg.lam > 0 else ()
        i0 = (inits or {}).get(c.front_object_id, (None, None))
        cf, cb, diam = fit_trunk_two_sided(PF, PB, sils, cfg.lam, front_init=i0[0], back_init=i0[1], seed=cfg.seed)
        model.trunk_fits[c.front_object_id] = (cf, cb, diam)
        mid = cf.origin
        q = cb.origin + ((mid - cb.origin) @ cb.axis) / (cf.axis @ cb.axis) * cb.axis
        d = q - mid
        out[c.front_object_id] = float(np.linalg.norm(d - (d @ cf.axis) * cf.axis))
    return out


def _transform_back(back: ReconstructionSide, T: RigidTransform) -> ReconstructionSide:
    b = back.copy()
    b.transform_world(T)
    return b


def _initial_objects(model: MergedModel, objs_f: dict, objs_b: dict, cfg: MergeConfig) -> list:
    """Semantic object states in the front frame: trunks from the joint two-sided fit, planes averaged."""
    tf = _annotation_map(model.trunks["front"])
    tb = _annotation_map(model.trunks["back"])
    gf = _annotation_map(model.grounds["front"])
    gb = _annotation_map(model.grounds["back"])
    T = model.T_FB
    objects = []
    for c in model.correspondences:
        if c.kind == "cylinder":
            af, ab = tf[c.front_object_id], tb[c.back_object_id]
            if c.front_object_id not in model.trunk_fits:
                trunk_offsets(model, cfg)
            cf, cb, diam = model.trunk_fits[c.front_object_id]
            axis = cf.axis + (cb.axis if cb.axis @ cf.axis >= 0 else -cb.axis)
            origin = 0.5 * (cf.origin + cb.origin)
            pose = frame_from_axis(axis, origin, along=0).as_vector()
            mf = np.concatenate([np.asarray(f["member_ids"], dtype=np.int64) for f in af.frames])
            mb = np.concatenate([np.asarray(f["member_ids"], dtype=np.int64) for f in ab.frames])
            mf = mf[objs_f[("cylinder", c.front_object_id)].support_ids]
            mb = mb[objs_b[("cylinder", c.back_object_id)].support_ids]
            objects.append(SemanticObjectState(c.front_object_id, "cylinder", pose, diam / 2.0,
                                               {"front": mf, "back": mb}))
        else:
            pf = objs_f[("plane", c.front_object_id)]
            pb = objs_b[("plane", c.back_object_id)]
            nb = T.apply_direction(pb.geometry.normal)
            nf = pf.geometry.normal
            n = nf + (nb if nb @ nf >= 0 else -nb)
            origin = 0.5 * (pf.geometry.origin + T.apply(pb.geometry.origin))
            pose = frame_from_axis(n, origin, along=2).as_vector()
            objects.append(SemanticObjectState(c.front_object_id, "plane", pose, cfg.t_s,
                                               {"front": pf.support_ids, "back": pb.support_ids}))
    return objects


def merge_sides(front: ReconstructionSide, back: ReconstructionSide, corr: Sequence[ObjectCorrespondence],
                trunks: dict, grounds: dict, cfg: MergeConfig = None, *, stages=("initial", "refined", "sba"),
                objects_f: Optional[dict] = None, objects_b: Optional[dict] = None) -> MergedModel:
    """Initial transform, LM refinement, then semantic BA; records trunk offsets per stage.

    ``trunks``/``grounds`` map ``'front'``/``'back'`` to annotation lists.
    ``stages`` may stop early (``('initial',)`` or ``('initial', 'refined')``).
    """
    cfg = cfg or MergeConfig()
    corr = [c if isinstance(c, ObjectCorrespondence) else ObjectCorrespondence(**c) for c in corr]
    objs_f = objects_f if objects_f is not None else fit_side_objects(front, trunks["front"], grounds["front"], cfg)
    objs_b = objects_b if objects_b is not None else fit_side_objects(back, trunks["back"], grounds["back"], cfg)
    T0 = solve_initial_transform(corr, objs_f, objs_b)
    model = MergedModel(front.copy(), _transform_back(back, T0), T0, [], trunks, grounds, corr)
    model.stage_transforms["initial"] = T0

    def side_inits(T_back: RigidTransform) -> dict:
        out = {}
        for c in corr:
            if c.kind == "cylinder":
                gf = objs_f[("cylinder", c.front_object_id)].geometry
                gb = objs_b[("cylinder", c.back_object_id)].geometry
                out[c.front_object_id] = (gf, gb.transformed(T_back))
        return out

    def record(stage, inits):
        for tid, off in sorted(trunk_offsets(model, cfg, inits).items()):
            model.stage_metrics.append((stage, tid, off))

    record("initial", side_inits(T0))
    if "refined" not in stages:
        model.objects = _initial_objects(model, objs_f, objs_b, cfg)
        return model
    T1, rep = refine_transform(corr, objs_f, objs_b, T0)
    model.reports["refine"] = rep
    model.T_FB = T1
    model.back = _transform_back(back, T1)
    model.stage_transforms["refined"] = T1
    record("refined", side_inits(T1))
    if "sba" not in stages:
        model.objects = _initial_objects(model, objs_f, objs_b, cfg)
        return model
    model.objects = _initial_objects(model, objs_f, objs_b, cfg)
    model.reports["sba"] = semantic_bundle_adjust(model, cfg.lambda_s, cfg)
    # the back frame's first pose carries the effective transform after SBA
    B0 = RigidTransform.from_vector(back.poses[0])
    model.T_FB = model.back.pose(0).inverse() @ B0
    model.stage_transforms["sba"] = model.T_FB
    record("sba", {k: v[:2] for k, v in model.trunk_fits.items()})
    return model
