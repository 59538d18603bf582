"""Synthetic orchard rows with known truth.

A row of trees runs along world x with z up. The front camera walks along
``y = -standoff`` looking +y and the back camera along ``y = +standoff``
looking -y. Each side's reconstruction frame is its frame-0 camera frame, so
the true front-from-back transform is ``T_F0 @ inv(T_B0)``.

Dense depth points are always measured from the true camera poses. Drift
enters only through the feature tracks: a landmark born in frame ``b`` is
placed at ``inv(T'_b) T_b X`` so that consecutive-frame geometry is exactly
consistent with the drifted trajectory ``T'``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BadSpec
from .geometry import Cylinder, ImageLine, Intrinsics, Plane, RigidTransform, rodrigues_exp
from .recon import CameraRig, DenseCloud, LoopCandidate, ReconstructionSide
from .semantics import GroundAnnotation, TrunkAnnotation, fit_line_tls, project_cylinder_silhouette

__all__ = [
    "LABELS",
    "NoiseSpec",
    "DriftSpec",
    "TrajectorySpec",
    "SceneSpec",
    "TreeModel",
    "SideData",
    "Scene",
    "GroundTruth",
    "splitmix64",
    "sub_rng",
    "inject_drift",
    "drift_transforms",
    "generate_scene",
    "trunk_object_id",
    "ground_object_id",
]

LABELS = {"ground": 0, "trunk": 1, "canopy": 2, "pole": 3}
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 step; used to derive independent sub-seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sub_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for a stream addressed by ``(seed, *path)``; independent of call order."""
    s = splitmix64(seed & _MASK64)
    for p in path:
        s = splitmix64(s ^ (p & _MASK64))
    return np.random.default_rng(s)


def trunk_object_id(tree: int) -> int:
    return tree


def ground_object_id(tree: int) -> int:
    return 1000 + tree


# -- spec -------------------------------------------------------------------------


class _SpecBase:
    @classmethod
    def from_dict(cls, d: dict, where: str = ""):
        if not isinstance(d, dict):
            raise BadSpec(f"{where or cls.__name__}: expected an object")
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in names:
                raise BadSpec(f"unknown key {where + k!r}")
            sub = _NESTED.get((cls.__name__, k))
            if sub is not None:
                v = sub.from_dict(v, f"{where}{k}.")
            elif isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kwargs[k] = v
        try:
            obj = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise BadSpec(f"{where or cls.__name__}: {e}") from e
        return obj

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def _positive(self, *names):
        for n in names:
            v = getattr(self, n)
            vals = np.ravel(np.asarray(v, dtype=float))
            if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise BadSpec(f"key {n!r} must be positive, got {v!r}")

    def _nonneg(self, *names):
        for n in names:
            v = getattr(self, n)
            vals = np.ravel(np.asarray(v, dtype=float))
            if not np.all(np.isfinite(vals)) or np.any(vals < 0):
                raise BadSpec(f"key {n!r} must be non-negative, got {v!r}")

    def _range(self, *names):
        for n in names:
            v = np.asarray(getattr(self, n), dtype=float).reshape(-1, 2)
            if np.any(v[:, 0] > v[:, 1]):
                raise BadSpec(f"key {n!r}: range low exceeds high")


@dataclass(frozen=True)
class NoiseSpec(_SpecBase):
    pixel_sigma: float = 0.0  # px, feature pixels
    depth_sigma: float = 0.0  # m, along the viewing ray
    outlier_fraction: float = 0.0  # feature observations with gross errors
    trunk_depth_bias: float = 0.0  # m, outward radial bias of trunk points
    line_sigma: float = 0.0  # px, perpendicular noise on silhouette segment endpoints

    def __post_init__(self):
        self._nonneg("pixel_sigma", "depth_sigma", "outlier_fraction", "line_sigma")
        if self.outlier_fraction >= 1:
            raise BadSpec("key 'outlier_fraction' must be < 1")


@dataclass(frozen=True)
class DriftSpec(_SpecBase):
    lateral_per_10m: float = 0.0  # m of lateral offset per 10 m travelled
    yaw_deg_per_10m: float = 0.0  # deg of yaw per 10 m travelled


@dataclass(frozen=True)
class TrajectorySpec(_SpecBase):
    standoff: float = 2.4
    camera_height: float = 1.1
    n_frames: int = 200
    margin: float = 0.6  # m beyond the first/last trunk
    return_pass: bool = False  # walk back along the row to create revisits
    return_offset: float = 0.3  # m further out on the way back
    wobble: float = 0.01  # m lateral/vertical sway amplitude
    wobble_deg: float = 1.0
    drift: DriftSpec = field(default_factory=DriftSpec)

    def __post_init__(self):
        self._positive("standoff", "camera_height", "n_frames")
        self._nonneg("margin", "return_offset", "wobble", "wobble_deg")
        if self.n_frames < 2 or (self.return_pass and self.n_frames < 4):
            raise BadSpec("key 'n_frames' too small")


@dataclass(frozen=True)
class SceneSpec(_SpecBase):
    seed: int = 0
    n_trees: int = 10
    spacing: float = 1.2
    position_jitter: float = 0.02
    trunk_radius: tuple = (0.02, 0.045)
    trunk_height: tuple = (0.5, 0.7)  # visible trunk, ground to canopy base
    trunk_tilt_deg: float = 2.0
    canopy_semi_axes: tuple = ((0.3, 0.45), (0.25, 0.4), (0.35, 0.55))
    canopy_lobes: tuple = (2, 3)
    lobe_offset: float = 0.15
    shell_thickness: float = 0.05
    ground: str = "flat"  # flat | sloped | piecewise
    slope_deg: float = 0.0
    pole: bool = False
    pole_height: float = 3.5
    pole_offset: float = 0.05
    trunk_points: int = 300  # per tree per side
    ground_points: int = 300
    canopy_points: int = 2000
    pole_points: int = 100
    landmarks_per_frame: int = 20
    track_length: int = 8
    annotated_frames: int = 3
    annotation_spread: int = 4  # frames between annotated views
    loop_stride: int = 10
    loop_matches: int = 150
    intrinsics: tuple = (320.0, 320.0, 320.0, 240.0)
    ir_intrinsics: tuple = (300.0, 300.0, 318.0, 242.0)
    ir_baseline: float = 0.015
    image_size: tuple = (640, 480)
    front: TrajectorySpec = field(default_factory=TrajectorySpec)
    back: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        self._positive("n_trees", "spacing", "trunk_radius", "trunk_height", "canopy_semi_axes", "canopy_lobes",
                       "shell_thickness", "trunk_points", "ground_points", "canopy_points", "landmarks_per_frame",
                       "track_length", "annotated_frames", "loop_stride", "intrinsics", "ir_intrinsics",
                       "image_size", "pole_height")
        self._nonneg("position_jitter", "trunk_tilt_deg", "lobe_offset", "slope_deg", "pole_offset",
                     "annotation_spread", "loop_matches", "pole_points")
        self._range("trunk_radius", "trunk_height", "canopy_semi_axes", "canopy_lobes")
        if self.ground not in ("flat", "sloped", "piecewise"):
            raise BadSpec(f"key 'ground' must be flat, sloped or piecewise, got {self.ground!r}")
        if np.asarray(self.canopy_semi_axes).shape != (3, 2):
            raise BadSpec("key 'canopy_semi_axes' needs three (low, high) ranges")

    def replace(self, **kw) -> "SceneSpec":
        return dataclasses.replace(self, **kw)


_NESTED = {
    ("SceneSpec", "front"): TrajectorySpec,
    ("SceneSpec", "back"): TrajectorySpec,
    ("SceneSpec", "noise"): NoiseSpec,
    ("TrajectorySpec", "drift"): DriftSpec,
}


# -- scene objects ---------------------------------------------------------------------


@dataclass
class TreeModel:
    index: int
    base: np.ndarray  # trunk foot on the ground
    axis: np.ndarray  # unit trunk direction
    radius: float
    trunk_height: float
    lobe_centers: np.ndarray  # (k, 3)
    lobe_axes: np.ndarray  # (k, 3) semi-axes, world aligned
    ground_normal: np.ndarray
    pole: Optional[np.ndarray] = None  # foot of the pole, vertical

    @property
    def trunk(self) -> Cylinder:
        return Cylinder(self.axis, self.base, self.radius, self.trunk_height)

    @property
    def ground_plane(self) -> Plane:
        return Plane(self.ground_normal, self.base)

    def height(self) -> float:
        """Canopy top above the local ground, along its normal."""
        n = self.ground_normal
        sup = (self.lobe_centers - self.base) @ n + np.linalg.norm(self.lobe_axes * n, axis=1)
        trunk_top = self.trunk_height * (self.axis @ n)
        return float(max(sup.max(), trunk_top))

    def inside_canopy(self, X, exclude: int = -1) -> np.ndarray:
        X = np.atleast_2d(X)
        inside = np.zeros(len(X), bool)
        for k, (c, a) in enumerate(zip(self.lobe_centers, self.lobe_axes)):
            if k != exclude:
                inside |= (((X - c) / a) ** 2).sum(axis=1) < 1.0
        return inside

    def canopy_volume(self, rng: np.random.Generator, n: int = 200_000) -> float:
        lo = (self.lobe_centers - self.lobe_axes).min(axis=0)
        hi = (self.lobe_centers + self.lobe_axes).max(axis=0)
        X = lo + (hi - lo) * rng.random((n, 3))
        return float(np.prod(hi - lo) * self.inside_canopy(X).mean())


@dataclass
class SideData:
    side: str
    rig: CameraRig
    n_frames: int
    obs_frame: np.ndarray
    obs_landmark: np.ndarray
    obs_pixel: np.ndarray
    obs_point: np.ndarray
    obs_valid: np.ndarray
    dense: DenseCloud
    loops: list
    trunks: list  # TrunkAnnotation
    grounds: list  # GroundAnnotation

    def to_reconstruction(self) -> ReconstructionSide:
        return ReconstructionSide(self.side, self.rig, np.zeros((self.n_frames, 6)), self.obs_frame.copy(),
                                  self.obs_landmark.copy(), self.obs_pixel.copy(), self.obs_point.copy(),
                                  self.obs_valid.copy(), dense=self.dense)


@dataclass
class Scene:
    spec: SceneSpec
    front: SideData
    back: SideData
    correspondences: list  # dicts front_object_id, back_object_id, kind


@dataclass
class GroundTruth:
    T_FB: RigidTransform
    trees: list  # TreeModel
    diameters: np.ndarray
    heights: np.ndarray
    volumes: np.ndarray
    true_poses: dict  # side -> (n, 6) world->camera in that side's frame
    drifted_poses: dict
    side_from_world: dict  # side -> RigidTransform from scene world to side frame

    def to_dict(self) -> dict:
        trees = []
        for t, d, h, v in zip(self.trees, self.diameters, self.heights, self.volumes):
            trees.append({
                "tree": t.index,
                "diameter": float(d),
                "height": float(h),
                "canopy_volume": float(v),
                "trunk_base_world": t.base.tolist(),
                "trunk_axis_world": t.axis.tolist(),
                "ground_normal_world": t.ground_normal.tolist(),
            })
        M = self.T_FB.as_matrix()[:3]
        return {
            "T_FB": {"matrix": M.tolist(), "quaternion_xyzw": self.T_FB.quaternion().tolist()},
            "trees": trees,
            "side_from_world": {k: v.as_matrix()[:3].tolist() for k, v in self.side_from_world.items()},
            "true_poses": {k: v.tolist() for k, v in self.true_poses.items()},
            "drifted_poses": {k: v.tolist() for k, v in self.drifted_poses.items()},
        }


# -- drift -------------------------------------------------------------------------------


def _rot_z(psi: float) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def drift_transforms(centers: np.ndarray, drift: DriftSpec, up=(0.0, 0.0, 1.0)) -> list:
    """Per-frame world-frame perturbations ``D_k`` with ``D_0 = I``.

    ``D_k`` rotates about the vertical through the first camera centre by
    ``yaw * s_k / 10`` and shifts by ``lateral * s_k / 10`` along the
    horizontal direction perpendicular to the initial travel direction,
    where ``s_k`` is the path length travelled up to frame ``k``.
    """
    centers = np.asarray(centers, dtype=float)
    up = np.asarray(up, dtype=float)
    steps = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(steps)]
    travel = centers[-1] - centers[0] if len(centers) > 1 else np.array([1.0, 0, 0])
    travel = travel - (travel @ up) * up
    nt = np.linalg.norm(travel)
    travel = travel / nt if nt > 0 else np.array([1.0, 0.0, 0.0])
    lateral = np.cross(up, travel)
    c0 = centers[0]
    out = []
    for sk in s:
        R = _rot_z(np.radians(drift.yaw_deg_per_10m) * sk / 10.0)
        t = c0 - R @ c0 + drift.lateral_per_10m * sk / 10.0 * lateral
        out.append(RigidTransform(R, t))
    return out


def inject_drift(poses: np.ndarray, drift: DriftSpec) -> np.ndarray:
    """Perturb world->camera poses by cumulative lateral and yaw drift; frame 0 is unchanged.

    The world frame is z-up. The perturbed camera-to-world pose is
    ``D_k @ inv(T_k)``.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 6)
    Ts = [RigidTransform.from_vector(p) for p in poses]
    centers = np.array([T.inverse().translation for T in Ts])
    D = drift_transforms(centers, drift)
    out = np.array([(T @ Dk.inverse()).as_vector() for T, Dk in zip(Ts, D)])
    out[0] = poses[0]
    return out


# -- generation -------------------------------------------------------------------------


def _ground_normal(spec: SceneSpec, rng) -> np.ndarray:
    a = np.radians(spec.slope_deg)
    if spec.ground == "flat":
        return np.array([0.0, 0.0, 1.0])
    if spec.ground == "sloped":
        return np.array([-np.sin(a), 0.0, np.cos(a)])
    phi = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(0, a)
    return np.array([np.sin(tilt) * np.cos(phi), np.sin(tilt) * np.sin(phi), np.cos(tilt)])


def _ground_z(spec: SceneSpec, x: float) -> float:
    if spec.ground == "sloped":
        return float(np.tan(np.radians(spec.slope_deg)) * x)
    return 0.0


def _make_tree(spec: SceneSpec, i: int) -> TreeModel:
    rng = sub_rng(spec.seed, 1, i)
    x = (i - (spec.n_trees - 1) / 2.0) * spec.spacing + rng.uniform(-1, 1) * spec.position_jitter
    y = rng.uniform(-1, 1) * spec.position_jitter
    base = np.array([x, y, _ground_z(spec, x)])
    normal = _ground_normal(spec, rng)
    tilt = np.radians(rng.uniform(0, spec.trunk_tilt_deg))
    phi = rng.uniform(0, 2 * np.pi)
    axis = np.array([np.sin(tilt) * np.cos(phi), np.sin(tilt) * np.sin(phi), np.cos(tilt)])
    radius = rng.uniform(*spec.trunk_radius)
    th = rng.uniform(*spec.trunk_height)
    k = int(rng.integers(spec.canopy_lobes[0], spec.canopy_lobes[1] + 1))
    rngs = np.asarray(spec.canopy_semi_axes, dtype=float)
    axes = rngs[:, 0] + (rngs[:, 1] - rngs[:, 0]) * rng.random((k, 3))
    top = base + th * axis
    centers = top + np.c_[rng.uniform(-1, 1, (k, 2)) * spec.lobe_offset, 0.8 * axes[:, 2]
                          + rng.uniform(0, 1, k) * spec.lobe_offset]
    pole = base + np.array([spec.pole_offset, 0.0, 0.0]) if spec.pole else None
    return TreeModel(i, base, axis, radius, th, centers, axes, normal, pole)


def _camera_path(spec: SceneSpec, side: str, trees: list) -> np.ndarray:
    """World->camera poses (n, 6) of one side in the scene world frame."""
    ts = spec.front if side == "front" else spec.back
    rng = sub_rng(spec.seed, 2, 0 if side == "front" else 1)
    xs = np.array([t.base[0] for t in trees])
    x0, x1 = xs.min() - ts.margin, xs.max() + ts.margin
    sgn = -1.0 if side == "front" else 1.0
    n = ts.n_frames
    n_fwd = n - n // 2 if ts.return_pass else n
    along = np.linspace(x0, x1, n_fwd)
    if side == "back":
        along = along[::-1]
    lateral = np.full(n_fwd, sgn * ts.standoff)
    if ts.return_pass:
        back = np.linspace(along[-1], along[0], n - n_fwd)
        along = np.r_[along, back]
        lateral = np.r_[lateral, np.full(n - n_fwd, sgn * (ts.standoff + ts.return_offset))]
    ph = rng.uniform(0, 2 * np.pi, 5)
    u = np.linspace(0, 6 * np.pi, n)
    look = np.array([0.0, -sgn, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, look)
    R_wc0 = np.stack([right, down, look], axis=1)
    poses = []
    for k in range(n):
        c = np.array([along[k], lateral[k] + ts.wobble * np.sin(u[k] + ph[0]),
                      _ground_z(spec, along[k]) + ts.camera_height + ts.wobble * np.sin(1.3 * u[k] + ph[1])])
        w = np.radians(ts.wobble_deg) * np.array([np.sin(0.7 * u[k] + ph[2]), np.sin(0.9 * u[k] + ph[3]),
                                                  np.sin(1.1 * u[k] + ph[4])])
        R_wc = rodrigues_exp(w) @ R_wc0
        poses.append(RigidTransform(R_wc, c).inverse().as_vector())
    return np.array(poses)


def _check_feasible(spec: SceneSpec, trees: list) -> None:
    for side, ts in (("front", spec.front), ("back", spec.back)):
        sgn = -1.0 if side == "front" else 1.0
        for t in trees:
            reach = np.abs(t.lobe_centers[:, 1] + sgn * t.lobe_axes[:, 1])
            if (reach.max() + 0.3 >= ts.standoff - ts.wobble) or ts.camera_height <= 0:
                raise BadSpec(f"camera inside canopy: key '{side}.standoff' {ts.standoff} too small")


def _sample_tree_side(spec: SceneSpec, t: TreeModel, side: str, rng):
    """World points and labels of one tree as seen from one side."""
    toward = np.array([0.0, -1.0 if side == "front" else 1.0, 0.0])
    pts, labels = [], []
    # trunk: camera-facing half only
    a = t.axis
    e1 = toward - (toward @ a) * a
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    th = rng.uniform(-np.pi / 2, np.pi / 2, spec.trunk_points)
    h = rng.uniform(0.1, t.trunk_height, spec.trunk_points)
    radial = np.cos(th)[:, None] * e1 + np.sin(th)[:, None] * e2
    pts.append(t.base + h[:, None] * a + (t.radius + spec.noise.trunk_depth_bias) * radial)
    labels.append(np.full(spec.trunk_points, LABELS["trunk"]))
    # ground patch in front of this side
    n = t.ground_normal
    g1 = np.array([1.0, 0.0, 0.0]) - n[0] * n
    g1 /= np.linalg.norm(g1)
    g2 = np.cross(n, g1)
    if g2 @ toward < 0:
        g2 = -g2
    gp = []
    while len(gp) < spec.ground_points:
        u = rng.uniform(-spec.spacing / 2, spec.spacing / 2, spec.ground_points)
        v = rng.uniform(0.0, 0.8, spec.ground_points)
        keep = np.hypot(u, v) > t.radius + 0.02
        gp.extend((t.base + u[keep, None] * g1 + v[keep, None] * g2).tolist())
    pts.append(np.array(gp[: spec.ground_points]))
    labels.append(np.full(spec.ground_points, LABELS["ground"]))
    # canopy: outer surface of the lobe union facing this side, thickened inward
    cp = []
    k = len(t.lobe_centers)
    while len(cp) < spec.canopy_points:
        m = 2 * spec.canopy_points
        lobe = rng.integers(0, k, m)
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        c, ax = t.lobe_centers[lobe], t.lobe_axes[lobe]
        X = c + ax * d
        nrm = d / ax
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        keep = (nrm @ toward) > 0
        for j in range(k):
            sel = keep & (lobe != j)
            inside = (((X[sel] - t.lobe_centers[j]) / t.lobe_axes[j]) ** 2).sum(axis=1) < 1.0
            idx = np.nonzero(sel)[0][inside]
            keep[idx] = False
        depth = np.minimum(np.abs(rng.normal(0, spec.shell_thickness / 2, m)), spec.shell_thickness)
        X = X - depth[:, None] * nrm
        cp.extend(X[keep].tolist())
    pts.append(np.array(cp[: spec.canopy_points]))
    labels.append(np.full(spec.canopy_points, LABELS["canopy"]))
    if t.pole is not None and spec.pole_points:
        r = 0.02
        th = rng.uniform(-np.pi / 2, np.pi / 2, spec.pole_points)
        h = rng.uniform(0.0, spec.pole_height, spec.pole_points)
        pe1 = toward
        pe2 = np.cross([0.0, 0.0, 1.0], pe1)
        pts.append(t.pole + h[:, None] * np.array([0, 0, 1.0]) + r * (np.cos(th)[:, None] * pe1
                                                                        + np.sin(th)[:, None] * pe2))
        labels.append(np.full(spec.pole_points, LABELS["pole"]))
    return np.concatenate(pts), np.concatenate(labels)


def _project(K: Intrinsics, Xc):
    return np.stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy], axis=1)


def _visible(K: Intrinsics, size, Xc, min_depth=0.3):
    ok = Xc[:, 2] > min_depth
    uv = np.full((len(Xc), 2), -1.0)
    uv[ok] = _project(K, Xc[ok])
    return ok & (uv[:, 0] >= 0) & (uv[:, 0] < size[0]) & (uv[:, 1] >= 0) & (uv[:, 1] < size[1])


def _silhouette_lines(spec, K, T_cam: RigidTransform, t: TreeModel, rng):
    """Noisy boundary lines of the visible trunk segment in one camera."""
    cyl = Cylinder(t.axis, t.base, t.radius)
    lines = project_cylinder_silhouette(cyl, T_cam, K)
    ends = T_cam.apply(np.array([t.base, t.base + t.trunk_height * t.axis]))
    v = _project(K, ends)[:, 1]
    out = []
    for l in lines:
        a, b, c = l.coefficients
        pts = np.stack([-(b * v + c) / a, v], axis=1)
        nrm = np.array([a, b]) / np.hypot(a, b)
        pts = pts + rng.normal(0, spec.noise.line_sigma, (2, 1)) * nrm if spec.noise.line_sigma > 0 else pts
        out.append(fit_line_tls(pts).coefficients)
    return out


def _generate_side(spec: SceneSpec, side: str, trees: list, poses_w: np.ndarray, drifted_w: np.ndarray,
                   rig: CameraRig):
    sid = 0 if side == "front" else 1
    noise = spec.noise
    Ts = [RigidTransform.from_vector(p) for p in poses_w]
    Td = [RigidTransform.from_vector(p) for p in drifted_w]
    centers = np.array([T.inverse().translation for T in Ts])
    ts = spec.front if side == "front" else spec.back
    n = len(Ts)
    n_fwd = n - n // 2 if ts.return_pass else n
    # dense points per tree, measured from the true pose of the nearest forward frame
    world, labels, tree_of = [], [], []
    for t in trees:
        X, lab = _sample_tree_side(spec, t, side, sub_rng(spec.seed, 3, sid, t.index))
        world.append(X)
        labels.append(lab)
        tree_of.append(np.full(len(X), t.index))
    world = np.concatenate(world)
    labels = np.concatenate(labels)
    tree_of = np.concatenate(tree_of)
    frame = np.abs(world[:, 0][:, None] - centers[:n_fwd, 0][None, :]).argmin(axis=1)
    rng = sub_rng(spec.seed, 4, sid)
    # trunk points are re-assigned to the annotated frames of their tree
    trunk_ann, ground_ann = [], []
    point_cam = np.empty_like(world)
    ann_frames = {}
    for t in trees:
        f0 = int(np.abs(centers[:n_fwd, 0] - t.base[0]).argmin())
        m = spec.annotated_frames
        offs = (np.arange(m) - (m - 1) / 2.0) * spec.annotation_spread
        fr = np.clip(np.round(f0 + offs).astype(int), 0, n_fwd - 1)
        ann_frames[t.index] = (f0, sorted(set(fr.tolist())))
        ids = np.nonzero((tree_of == t.index) & (labels == LABELS["trunk"]))[0]
        frs = ann_frames[t.index][1]
        frame[ids] = np.array(frs)[np.arange(len(ids)) % len(frs)]
    for k in range(n_fwd):
        sel = frame == k
        if sel.any():
            point_cam[sel] = Ts[k].apply(world[sel])
    if noise.depth_sigma > 0:
        ray = point_cam / np.linalg.norm(point_cam, axis=1, keepdims=True)
        point_cam = point_cam + rng.normal(0, noise.depth_sigma, (len(point_cam), 1)) * ray
    dense = DenseCloud(frame, point_cam, labels, tree_of)
    line_rng = sub_rng(spec.seed, 5, sid)
    for t in trees:
        f0, frs = ann_frames[t.index]
        ids = np.nonzero((tree_of == t.index) & (labels == LABELS["trunk"]))[0]
        entries = []
        for f in frs:
            members = ids[frame[ids] == f]
            entries.append({"frame_id": int(f), "member_ids": members.tolist(),
                            "lines": [list(map(float, l)) for l in _silhouette_lines(spec, rig.K_o, Ts[f], t,
                                                                                     line_rng)]})
        trunk_ann.append(TrunkAnnotation(trunk_object_id(t.index), side, entries))
        rel = world - t.base
        hgt = rel @ t.ground_normal
        box = (np.abs(rel[:, 0]) < spec.spacing / 2) & (hgt < t.trunk_height) & (labels != LABELS["pole"])
        ground_ann.append(GroundAnnotation(ground_object_id(t.index), side, f0, np.nonzero(box)[0],
                                           trunk_object_id(t.index)))
    # feature tracks: landmark placed so that its track agrees with the drifted trajectory
    pool = world
    frng = sub_rng(spec.seed, 6, sid)
    size = spec.image_size
    obs_f, obs_l, obs_x = [], [], []
    next_id = [0]

    def add_tracks(X, b, length):
        """Track points ``X`` from frame ``b``; returns their landmark ids (-1 if not visible at birth)."""
        P = Td[b].inverse().apply(Ts[b].apply(X))
        alive = np.ones(len(X), bool)
        ids = np.full(len(X), -1, dtype=np.int64)
        for j in range(b, min(n, b + length)):
            Xc = Td[j].apply(P)
            alive &= _visible(rig.K_o, size, Xc)
            if j == b:
                ids[alive] = next_id[0] + np.arange(alive.sum())
                next_id[0] += int(alive.sum())
            if not alive.any():
                break
            obs_f.append(np.full(alive.sum(), j))
            obs_l.append(ids[alive])
            obs_x.append(Xc[alive])
        return ids

    loop_plan = []
    if ts.return_pass and spec.loop_matches > 0:
        for j in range(n_fwd + spec.loop_stride // 2, n, spec.loop_stride):
            i = int(np.abs(centers[:n_fwd, 0] - centers[j, 0]).argmin())
            loop_plan.append((i, j))
    for b in range(n):
        vis = np.nonzero(_visible(rig.K_o, size, Ts[b].apply(pool)))[0]
        pick = frng.choice(vis, size=min(spec.landmarks_per_frame, len(vis)), replace=False)
        add_tracks(pool[np.sort(pick)], b, spec.track_length)
    loop_births = {}
    for i, j in loop_plan:
        both = np.nonzero(_visible(rig.K_o, size, Ts[i].apply(pool)) & _visible(rig.K_o, size, Ts[j].apply(pool)))[0]
        pick = np.sort(frng.choice(both, size=min(spec.loop_matches, len(both)), replace=False))
        a = add_tracks(pool[pick], i, spec.track_length)
        bb = add_tracks(pool[pick], j, spec.track_length)
        ok = (a >= 0) & (bb >= 0)
        loop_births[(i, j)] = (a[ok], bb[ok])
    loops = []
    obs_f = np.concatenate(obs_f)
    obs_l = np.concatenate(obs_l)
    true_cam = np.concatenate(obs_x)
    pix = _project(rig.K_o, true_cam)
    pts = true_cam.copy()
    if noise.pixel_sigma > 0:
        pix = pix + rng.normal(0, noise.pixel_sigma, pix.shape)
    if noise.depth_sigma > 0:
        ray = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        pts = pts + rng.normal(0, noise.depth_sigma, (len(pts), 1)) * ray
    if noise.outlier_fraction > 0:
        bad = rng.random(len(pts)) < noise.outlier_fraction
        pix[bad] += rng.uniform(-30, 30, (bad.sum(), 2))
        pts[bad] += rng.uniform(-0.3, 0.3, (bad.sum(), 3))
    valid = np.ones(len(pts), bool)
    for (i, j), (la, lb) in loop_births.items():
        ia = _obs_index(obs_f, obs_l, i, la)
        ib = _obs_index(obs_f, obs_l, j, lb)
        loops.append(LoopCandidate(i, j, pts[ia], pts[ib], la, lb))
    data = SideData(side, rig, n, obs_f, obs_l, pix, pts, valid, dense, loops, trunk_ann, ground_ann)
    return data


def _obs_index(obs_f, obs_l, frame, landmarks):
    sel = np.nonzero(obs_f == frame)[0]
    lookup = dict(zip(obs_l[sel].tolist(), sel.tolist()))
    return np.array([lookup[int(l)] for l in landmarks], dtype=np.int64)


def _rig(spec: SceneSpec) -> CameraRig:
    return CameraRig(Intrinsics(*spec.intrinsics), Intrinsics(*spec.ir_intrinsics),
                     RigidTransform(np.eye(3), [-spec.ir_baseline, 0.0, 0.0]), *spec.image_size)


def generate_scene(spec: SceneSpec) -> tuple[Scene, GroundTruth]:
    """Deterministic synthetic row for ``spec``; see the module docstring for conventions."""
    trees = [_make_tree(spec, i) for i in range(spec.n_trees)]
    _check_feasible(spec, trees)
    rig = _rig(spec)
    sides, true_poses, drifted, side_from_world = {}, {}, {}, {}
    for side in ("front", "back"):
        ts = spec.front if side == "front" else spec.back
        Pw = _camera_path(spec, side, trees)
        Dw = inject_drift(Pw, ts.drift)
        data = _generate_side(spec, side, trees, Pw, Dw, rig)
        S = RigidTransform.from_vector(Pw[0])
        Sinv = S.inverse()
        side_from_world[side] = S
        true_poses[side] = np.array([(RigidTransform.from_vector(p) @ Sinv).as_vector() for p in Pw])
        drifted[side] = np.array([(RigidTransform.from_vector(p) @ Sinv).as_vector() for p in Dw])
        sides[side] = data
    T_FB = side_from_world["front"] @ side_from_world["back"].inverse()
    corr = []
    for t in trees:
        corr.append({"front_object_id": trunk_object_id(t.index), "back_object_id": trunk_object_id(t.index),
                     "kind": "cylinder"})
        corr.append({"front_object_id": ground_object_id(t.index), "back_object_id": ground_object_id(t.index),
                     "kind": "plane"})
    vols = np.array([t.canopy_volume(sub_rng(spec.seed, 7, t.index)) for t in trees])
    gt = GroundTruth(T_FB, trees, np.array([2 * t.radius for t in trees]), np.array([t.height() for t in trees]),
                     vols, true_poses, drifted, side_from_world)
    return Scene(spec, sides["front"], sides["back"], corr), gt
