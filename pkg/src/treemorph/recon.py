"""Single-side reconstruction backend.

Pairwise 3-point RANSAC chaining, pairwise/local/global bundle adjustment
with RGB reprojection and infrared 3D terms, loop linking and pose-graph
optimization.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DisconnectedGraph, InsufficientData, NoModelFound, UnconstrainedParameter
from .geometry import Intrinsics, RigidTransform
from .residuals import make_depth_block, make_relative_pose_block, make_reprojection_block
from .solver import ParameterGroup, SolveReport, lm_solve, ransac, total_cost

log = logging.getLogger(__name__)

__all__ = [
    "CameraRig",
    "DenseCloud",
    "LoopCandidate",
    "LoopEdge",
    "ReconstructionSide",
    "ReconConfig",
    "kabsch",
    "estimate_pairwise_pose",
    "bundle_adjust",
    "ba_blocks",
    "link_loops",
    "pose_graph_optimize",
    "reconstruct_side",
    "align_trajectories",
]


@dataclass(frozen=True)
class CameraRig:
    K_o: Intrinsics
    K_i: Intrinsics
    T_io: RigidTransform  # RGB camera frame -> infrared camera frame
    width: int = 640
    height: int = 480


@dataclass
class DenseCloud:
    """Denoised depth points, each measured in the camera frame of one frame."""

    frame: np.ndarray  # (k,) frame index
    point_cam: np.ndarray  # (k, 3)
    label: np.ndarray  # (k,) class code, see scenegen.LABELS
    tree: np.ndarray  # (k,) tree index or -1

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.int64)
        self.point_cam = np.asarray(self.point_cam, dtype=float).reshape(-1, 3)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.tree = np.asarray(self.tree, dtype=np.int64)

    def __len__(self):
        return len(self.frame)


@dataclass
class LoopCandidate:
    frame_a: int
    frame_b: int
    points_a: np.ndarray  # (m, 3) in camera a
    points_b: np.ndarray  # (m, 3) in camera b
    landmark_a: Optional[np.ndarray] = None  # (m,) landmark ids or -1
    landmark_b: Optional[np.ndarray] = None


@dataclass
class LoopEdge:
    frame_a: int
    frame_b: int
    relative: np.ndarray  # 6-vector of T_a T_b^-1
    inliers: int
    merges: list = field(default_factory=list)  # (landmark_a, landmark_b)


@dataclass
class ReconstructionSide:
    side: str
    rig: CameraRig
    poses: np.ndarray  # (n, 6) world -> camera
    obs_frame: np.ndarray
    obs_landmark: np.ndarray
    obs_pixel: np.ndarray
    obs_point: np.ndarray
    obs_valid: np.ndarray
    landmarks: np.ndarray = None  # (m, 3)
    dense: Optional[DenseCloud] = None
    loop_edges: list = field(default_factory=list)

    def __post_init__(self):
        self.poses = np.array(self.poses, dtype=float).reshape(-1, 6)
        self.obs_frame = np.asarray(self.obs_frame, dtype=np.int64)
        self.obs_landmark = np.asarray(self.obs_landmark, dtype=np.int64)
        self.obs_pixel = np.asarray(self.obs_pixel, dtype=float).reshape(-1, 2)
        self.obs_point = np.asarray(self.obs_point, dtype=float).reshape(-1, 3)
        self.obs_valid = np.asarray(self.obs_valid, dtype=bool)
        m = int(self.obs_landmark.max()) + 1 if len(self.obs_landmark) else 0
        if self.landmarks is None:
            self.landmarks = np.zeros((m, 3))
        self.landmarks = np.array(self.landmarks, dtype=float).reshape(-1, 3)
        if len(self.obs_frame) and (self.obs_frame.max() >= len(self.poses) or self.obs_landmark.max() >= len(self.landmarks)):
            raise ValueError("observation references a missing frame or landmark")

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def pose(self, i: int) -> RigidTransform:
        return RigidTransform.from_vector(self.poses[i])

    def camera_centers(self) -> np.ndarray:
        from .geometry import rodrigues_exp

        R = rodrigues_exp(self.poses[:, :3])
        return -np.einsum("nji,nj->ni", R, self.poses[:, 3:])

    def dense_world(self, mask=None) -> np.ndarray:
        """Dense points mapped to the side world frame with the current poses."""
        from .geometry import rodrigues_exp

        d = self.dense
        idx = np.arange(len(d)) if mask is None else np.nonzero(mask)[0] if np.asarray(mask).dtype == bool else np.asarray(mask)
        f = d.frame[idx]
        R = rodrigues_exp(self.poses[:, :3])
        t = self.poses[:, 3:]
        return np.einsum("nji,nj->ni", R[f], d.point_cam[idx] - t[f])

    def copy(self) -> "ReconstructionSide":
        import copy

        return copy.deepcopy(self)

    def transform_world(self, T: RigidTransform) -> None:
        """Re-express the side in a new world frame: ``X_new = T X_old``."""
        Tinv = T.inverse()
        for i in range(self.n_frames):
            self.poses[i] = (self.pose(i) @ Tinv).as_vector()
        self.landmarks = T.apply(self.landmarks)


@dataclass
class ReconConfig:
    ransac_threshold: float = 0.02
    ransac_iters: int = 200
    min_loop_inliers: int = 100
    local_ba_min_shared: int = 15
    local_ba_max_frames: int = 10
    local_ba_stride: int = 5
    local_ba_iters: int = 5
    pairwise_ba_iters: int = 3
    global_ba_iters: int = 30
    ba_function_tolerance: float = 1e-6
    huber_px: float = 1.0
    huber_depth: float = 1.0
    literal_depth: bool = True
    use_loops: bool = True
    seed: int = 0


def kabsch(A: np.ndarray, B: np.ndarray) -> RigidTransform:
    """Least-squares rigid T with ``A ≈ T(B)``."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (B - cb).T @ (A - ca)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, ca - R @ cb)


def _collinear(P: np.ndarray, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    return s[1] <= tol * max(s[0], 1e-300) or s[0] < 1e-12


def estimate_pairwise_pose(points_a, points_b, seed: int = 0, *, threshold: float = 0.02, max_iters: int = 200):
    """Rigid transform ``T`` with ``points_a ≈ T(points_b)`` by 3-point RANSAC + LS refit.

    Returns ``(T, inlier_mask)``.
    """
    A = np.asarray(points_a, dtype=float).reshape(-1, 3)
    B = np.asarray(points_b, dtype=float).reshape(-1, 3)
    if len(A) < 3:
        raise InsufficientData("need at least 3 matches")
    data = np.concatenate([A, B], axis=1)

    def fit(S):
        if _collinear(S[:, :3]) or _collinear(S[:, 3:]):
            return None
        return kabsch(S[:, :3], S[:, 3:])

    def score(T, D):
        return np.linalg.norm(D[:, :3] - T.apply(D[:, 3:]), axis=1)

    try:
        T, mask = ransac(data, fit, score, sample_size=3, seed=seed, max_iters=max_iters,
                         inlier_threshold=threshold, confidence=0.9999)
    except NoModelFound as e:
        raise InsufficientData("all samples degenerate") from e
    if mask.sum() >= 3 and not _collinear(A[mask]):
        T = kabsch(A[mask], B[mask])
        mask = score(T, data) <= threshold
    return T, mask


def ba_blocks(side: ReconstructionSide, obs_mask: np.ndarray, frame_map: np.ndarray, lm_map: np.ndarray,
              cfg: ReconConfig):
    """Reprojection and depth residual blocks for the selected observations (indices remapped)."""
    f = frame_map[side.obs_frame[obs_mask]]
    l = lm_map[side.obs_landmark[obs_mask]]
    blocks = [make_reprojection_block(f, l, side.obs_pixel[obs_mask], side.rig.K_o, loss=cfg.huber_px)]
    v = side.obs_valid[obs_mask]
    if v.any():
        blocks.append(make_depth_block(f[v], l[v], side.obs_point[obs_mask][v], side.rig.K_i, side.rig.T_io.rotation,
                                       side.rig.T_io.translation, literal=cfg.literal_depth, loss=cfg.huber_depth))
    return blocks


def _ba_problem(side, frames, fixed, cfg):
    frames = np.unique(np.asarray(frames, dtype=np.int64))
    if len(frames) == 0:
        raise ValueError("empty bundle adjustment scope")
    in_scope = np.zeros(side.n_frames, bool)
    in_scope[frames] = True
    obs_mask = in_scope[side.obs_frame]
    seen = np.unique(side.obs_frame[obs_mask])
    if len(seen) < len(frames):
        missing = np.setdiff1d(frames, seen)
        raise UnconstrainedParameter(f"frames without observations: {missing[:5].tolist()}")
    lms = np.unique(side.obs_landmark[obs_mask])
    frame_map = np.full(side.n_frames, -1)
    frame_map[frames] = np.arange(len(frames))
    lm_map = np.full(len(side.landmarks), -1)
    lm_map[lms] = np.arange(len(lms))
    const = np.isin(frames, np.asarray(list(fixed), dtype=np.int64))
    params = {
        "cams": ParameterGroup(side.poses[frames], "pose", constant=const),
        "points": ParameterGroup(side.landmarks[lms]),
    }
    blocks = ba_blocks(side, obs_mask, frame_map, lm_map, cfg)
    return params, blocks, frames, lms


def bundle_adjust(side: ReconstructionSide, scope="global", fixed=(0,), *, frames=None, cfg: ReconConfig = None,
                  max_iterations: Optional[int] = None) -> SolveReport:
    """Minimize reprojection + infrared 3D error over poses and landmarks in ``scope``.

    ``scope`` is ``'pairwise'``, ``'local'`` or ``'global'``; for the first
    two ``frames`` lists the frames to optimize. Frames in ``fixed`` are held
    constant (gauge). Updates ``side`` in place.
    """
    cfg = cfg or ReconConfig()
    if scope == "global":
        frames = np.arange(side.n_frames)
        its = cfg.global_ba_iters
    else:
        if frames is None:
            raise ValueError(f"scope {scope!r} needs explicit frames")
        its = cfg.pairwise_ba_iters if scope == "pairwise" else cfg.local_ba_iters
    if max_iterations is not None:
        its = max_iterations
    if not np.isin(np.asarray(list(fixed)), frames).any():
        raise UnconstrainedParameter("gauge: no fixed frame inside the scope")
    params, blocks, fr, lms = _ba_problem(side, frames, fixed, cfg)
    out, rep = lm_solve(blocks, params, max_iterations=its, eliminate="points",
                         function_tolerance=cfg.ba_function_tolerance)
    side.poses[fr] = out["cams"].values
    side.landmarks[lms] = out["points"].values
    return rep


def ba_cost(side: ReconstructionSide, cfg: ReconConfig = None) -> float:
    cfg = cfg or ReconConfig()
    params, blocks, _, _ = _ba_problem(side, np.arange(side.n_frames), (0,), cfg)
    return total_cost(blocks, params)


def link_loops(candidates: Sequence[LoopCandidate], *, min_inliers: int = 100, threshold: float = 0.02,
               seed: int = 0) -> list:
    """Accept loop candidates whose matches support a rigid pose with enough inliers."""
    edges = []
    for k, c in enumerate(candidates):
        if len(c.points_a) < max(3, min_inliers):
            continue
        try:
            T, mask = estimate_pairwise_pose(c.points_a, c.points_b, seed + k, threshold=threshold)
        except InsufficientData:
            continue
        n = int(mask.sum())
        if n < min_inliers:
            continue
        merges = []
        if c.landmark_a is not None and c.landmark_b is not None:
            la, lb = np.asarray(c.landmark_a), np.asarray(c.landmark_b)
            ok = mask & (la >= 0) & (lb >= 0)
            merges = list(zip(la[ok].tolist(), lb[ok].tolist()))
        edges.append(LoopEdge(c.frame_a, c.frame_b, T.as_vector(), n, merges))
    return edges


def pose_graph_optimize(poses: np.ndarray, edges, fixed: int = 0, *, weights=None, max_iterations: int = 100):
    """Optimize world->camera poses against relative-pose edges ``(a, b, Z)`` with ``Z ≈ T_a T_b^-1``.

    Returns ``(new_poses, report)``.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    n = len(poses)
    a = np.array([e[0] for e in edges], dtype=np.int64)
    b = np.array([e[1] for e in edges], dtype=np.int64)
    Z = np.array([np.asarray(e[2], dtype=float) for e in edges]).reshape(-1, 6)
    G = coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n))
    ncomp, _ = connected_components(G, directed=False)
    if ncomp > 1:
        raise DisconnectedGraph(f"pose graph has {ncomp} components")
    const = np.zeros(n, bool)
    const[fixed] = True
    params = {"cams": ParameterGroup(poses, "pose", constant=const)}
    w = np.ones(len(a)) if weights is None else np.asarray(weights, dtype=float)
    blocks = []
    for wv in np.unique(w):
        sel = w == wv
        blocks.append(make_relative_pose_block(a[sel], b[sel], Z[sel], weight=float(wv)))
    out, rep = lm_solve(blocks, params, max_iterations=max_iterations)
    return out["cams"].values, rep


def _relative(poses, a, b) -> np.ndarray:
    Ta = RigidTransform.from_vector(poses[a])
    Tb = RigidTransform.from_vector(poses[b])
    return (Ta @ Tb.inverse()).as_vector()


def _init_landmarks(side, first_obs, frames):
    """(Re)initialize landmarks first observed in ``frames`` from their first valid 3D measurement."""
    for f in frames:
        sel = first_obs[first_obs[:, 1] == f]
        if len(sel) == 0:
            continue
        T = side.pose(f).inverse()
        side.landmarks[sel[:, 0]] = T.apply(side.obs_point[sel[:, 2]])


def _first_observations(side):
    order = np.lexsort((side.obs_frame, ~side.obs_valid, side.obs_landmark))
    lm = side.obs_landmark[order]
    first = np.r_[True, lm[1:] != lm[:-1]]
    idx = order[first]
    return np.stack([side.obs_landmark[idx], side.obs_frame[idx], idx], axis=1)


def _shared_matches(side, a, b):
    ma = (side.obs_frame == a) & side.obs_valid
    mb = (side.obs_frame == b) & side.obs_valid
    la = side.obs_landmark[ma]
    lb = side.obs_landmark[mb]
    common, ia, ib = np.intersect1d(la, lb, return_indices=True)
    return side.obs_point[ma][ia], side.obs_point[mb][ib], common


def _local_window(side, k, cfg, frame_lms):
    mine = frame_lms[k]
    cands = []
    for j in range(max(0, k - 4 * cfg.local_ba_max_frames), min(side.n_frames, k + 1)):
        if j == k:
            continue
        shared = len(np.intersect1d(mine, frame_lms[j], assume_unique=True))
        if shared >= cfg.local_ba_min_shared:
            cands.append((abs(k - j), j))
    cands.sort()
    window = sorted([k] + [j for _, j in cands[: cfg.local_ba_max_frames - 1]])
    return window


def reconstruct_side(side: ReconstructionSide, loop_candidates: Sequence[LoopCandidate] = (),
                     cfg: ReconConfig = None) -> ReconstructionSide:
    """Full single-side backend; frames must be chained by consecutive index.

    Order: pairwise pose chaining with pairwise BA, local BA, loop linking,
    pose-graph optimization, global BA. Loop matches that carry landmark ids
    merge those landmarks for global BA; otherwise loops only constrain the
    pose graph. ``side.poses`` is overwritten; frame 0 defines the world frame.
    """
    cfg = cfg or ReconConfig()
    side = side.copy()
    n = side.n_frames
    side.poses[:] = 0.0
    first = _first_observations(side)
    _init_landmarks(side, first, [0])
    for k in range(n - 1):
        A, B, _ = _shared_matches(side, k, k + 1)
        T, _ = estimate_pairwise_pose(A, B, cfg.seed + k, threshold=cfg.ransac_threshold, max_iters=cfg.ransac_iters)
        side.poses[k + 1] = (T.inverse() @ side.pose(k)).as_vector()
        _init_landmarks(side, first, [k + 1])
        bundle_adjust(side, "pairwise", fixed=(k,), frames=[k, k + 1], cfg=cfg)
    frame_lms = [np.unique(side.obs_landmark[side.obs_frame == k]) for k in range(n)]
    for k in range(1, n, max(1, cfg.local_ba_stride)):
        window = _local_window(side, k, cfg, frame_lms)
        if len(window) < 2:
            continue
        bundle_adjust(side, "local", fixed=(window[0],), frames=window, cfg=cfg)
    side.loop_edges = []
    if cfg.use_loops and loop_candidates:
        side.loop_edges = link_loops(loop_candidates, min_inliers=cfg.min_loop_inliers, threshold=cfg.ransac_threshold,
                                     seed=cfg.seed)
        for e in side.loop_edges:
            _merge_landmarks(side, e.merges)
    if side.loop_edges:
        before = side.poses.copy()
        edges = [(k, k + 1, _relative(side.poses, k, k + 1)) for k in range(n - 1)]
        edges += [(e.frame_a, e.frame_b, e.relative) for e in side.loop_edges]
        side.poses, _ = pose_graph_optimize(side.poses, edges, 0)
        _move_landmarks_with_anchor(side, first, before)
    bundle_adjust(side, "global", fixed=(0,), cfg=cfg)
    return side


def _merge_landmarks(side, merges):
    for la, lb in merges:
        if la != lb:
            side.obs_landmark[side.obs_landmark == lb] = la


def _move_landmarks_with_anchor(side, first, before):
    for lm, f, _ in first:
        old = RigidTransform.from_vector(before[f])
        new = side.pose(f)
        side.landmarks[lm] = new.inverse().apply(old.apply(side.landmarks[lm]))


def align_trajectories(est_poses, true_poses) -> tuple[float, float]:
    """Max (rotation rad, position m) camera error after the best rigid alignment.

    Alignment uses each camera centre plus points 1 m along its optical and
    down axes, so a straight trajectory still fixes the rotation.
    """
    from .geometry import rodrigues_exp

    def anchors(P):
        R = rodrigues_exp(P[:, :3])
        c = -np.einsum("nji,nj->ni", R, P[:, 3:])
        return R, c, np.concatenate([c, c + R[:, 2, :], c + R[:, 1, :]])

    Re, ce, Ae = anchors(np.asarray(est_poses, dtype=float).reshape(-1, 6))
    Rt, ct, At = anchors(np.asarray(true_poses, dtype=float).reshape(-1, 6))
    T = kabsch(At, Ae)
    pos = np.linalg.norm(T.apply(ce) - ct, axis=1).max()
    M = Rt @ T.rotation @ np.transpose(Re, (0, 2, 1))
    ang = np.arccos(np.clip((np.trace(M, axis1=1, axis2=2) - 1) / 2, -1, 1)).max()
    return float(ang), float(pos)
