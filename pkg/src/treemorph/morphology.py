"""Per-tree measurement: row track, segmentation, height, and canopy volumes."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .errors import DegenerateInput, EmptyTree, InsufficientData, OrderingViolation, TreeMorphError
from .geometry import Plane

log = logging.getLogger(__name__)

__all__ = [
    "RowTrack",
    "TreeSegment",
    "AlphaShape3D",
    "AlphaComplex",
    "MorphologyConfig",
    "TreeRecord",
    "MorphologyReport",
    "fit_row_track",
    "segment_trees",
    "alpha_shape_volume",
    "alpha_sweep",
    "convex_hull_volume",
    "cylinder_model_volume",
    "tree_height",
    "MeasureInput",
    "measurement_input",
    "measure_all",
    "measure_trees",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("tree_id", "diameter_m", "height_m", "vol_alpha_m3", "vol_hull_m3", "vol_cyl_m3", "alpha_m")


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# -- row track -------------------------------------------------------------------------------


@dataclass(frozen=True)
class RowTrack:
    """Line on the ground: ``origin + s * direction``; ``up`` is the ground normal."""

    origin: np.ndarray
    direction: np.ndarray
    up: np.ndarray

    def along(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.origin) @ self.direction

    def lateral(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.origin) @ np.cross(self.up, self.direction)


def fit_row_track(trunk_origins, up) -> RowTrack:
    """Total least squares line through trunk origins projected along ``up``.

    The direction is oriented from the first to the last trunk.

    Raises
    ------
    InsufficientData
        Fewer than two trunks.
    """
    O = np.asarray(trunk_origins, dtype=float).reshape(-1, 3)
    if len(O) < 2:
        raise InsufficientData("a row track needs at least two trunks")
    up = _unit(up)
    c = O.mean(axis=0)
    Q = (O - c) - np.outer((O - c) @ up, up)
    _, _, Vt = np.linalg.svd(Q, full_matrices=False)
    d = Vt[0] - (Vt[0] @ up) * up
    d = _unit(d)
    if (O[-1] - O[0]) @ d < 0:
        d = -d
    return RowTrack(c, d, up)


# -- segmentation ----------------------------------------------------------------------------


@dataclass
class TreeSegment:
    tree_id: int
    cut_left: float  # along-track positions of the cutting planes
    cut_right: float
    radius_left: float  # half-cylinder radii sqrt(2) * d_s
    radius_right: float
    member_ids: np.ndarray


def _cut_position(s, lo, hi, bin_width, window):
    gap = hi - lo
    a, b = lo + 0.5 * (1 - window) * gap, hi - 0.5 * (1 - window) * gap
    mid = 0.5 * (lo + hi)
    n_bins = int(np.floor((b - a) / bin_width))
    if n_bins < 1:
        return mid
    edges = a + bin_width * np.arange(n_bins + 1)
    edges += 0.5 * ((b - a) - bin_width * n_bins)  # centre the bins in the window
    counts, _ = np.histogram(s, bins=edges)
    if not len(s) or counts.sum() == 0:
        return mid
    centres = 0.5 * (edges[:-1] + edges[1:])
    best = np.flatnonzero(counts == counts.min())
    return float(centres[best[np.argmin(np.abs(centres[best] - mid))]])


def segment_trees(points, trunk_origins, track: RowTrack, tree_ids: Optional[Sequence[int]] = None, *,
                  bin_width: float = 0.05, window: float = 0.5, end_margin: float = 1.0) -> list:
    """Split row points into per-tree regions bounded by cutting planes across the track.

    A cutting plane sits at the along-track density minimum inside the middle
    ``window`` fraction of each trunk gap, or at the gap midpoint when the
    window holds no points. A tree's region is the slab between its cutting
    planes joined with two half-cylinders about the vertical through its trunk,
    each of radius ``sqrt(2)`` times the trunk-to-plane distance on that side.
    Regions may overlap. The outer planes sit ``end_margin`` beyond the end trunks.

    Raises
    ------
    OrderingViolation
        Trunks are not strictly increasing along the track.
    """
    X = np.asarray(points, dtype=float).reshape(-1, 3)
    O = np.asarray(trunk_origins, dtype=float).reshape(-1, 3)
    ids = list(range(len(O))) if tree_ids is None else list(tree_ids)
    st = track.along(O)
    if np.any(np.diff(st) <= 0):
        raise OrderingViolation(f"trunks not ordered along the row track: {np.round(st, 3).tolist()}")
    s = track.along(X)
    cuts = [st[0] - end_margin]
    for i in range(len(O) - 1):
        lo, hi = st[i], st[i + 1]
        inside = s[(s > lo) & (s < hi)]
        cuts.append(_cut_position(inside, lo, hi, bin_width, window))
    cuts.append(st[-1] + end_margin)
    out = []
    for i, tid in enumerate(ids):
        cl, cr = cuts[i], cuts[i + 1]
        if not cl < st[i] < cr:
            raise OrderingViolation(f"trunk {tid} lies outside its gap interval")
        rl, rr = np.sqrt(2) * (st[i] - cl), np.sqrt(2) * (cr - st[i])
        D = X - O[i]
        radial = np.linalg.norm(D - np.outer(D @ track.up, track.up), axis=1)
        ds = s - st[i]
        member = ((s >= cl) & (s <= cr)) | ((ds <= 0) & (radial <= rl)) | ((ds >= 0) & (radial <= rr))
        out.append(TreeSegment(int(tid), float(cl), float(cr), float(rl), float(rr), np.flatnonzero(member)))
    return out


# -- volumes -----------------------------------------------------------------------------------


def _check_solid(P):
    if len(P) < 4:
        raise DegenerateInput(f"need at least 4 points for a volume, got {len(P)}")
    sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[2] / sv[0] < 1e-10:
        raise DegenerateInput("points are coplanar or collinear")


def convex_hull_volume(points) -> float:
    """Volume of the convex hull.

    Raises
    ------
    DegenerateInput
        Fewer than four affinely independent points.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    _check_solid(P)
    try:
        return float(ConvexHull(P).volume)
    except QhullError as e:
        raise DegenerateInput(str(e)) from e


@dataclass
class AlphaShape3D:
    point_ids: np.ndarray
    alpha: float
    tetrahedra: np.ndarray  # (m, 4) indices into point_ids
    component: np.ndarray  # component label per kept tetrahedron
    component_volumes: np.ndarray
    volume: float


def _min_face_circumradius(T):
    """Smallest finite triangle circumradius over the four faces of each (m, 4, 3) tetrahedron."""
    best = np.full(len(T), np.inf)
    for face in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = (T[:, k] for k in face)
        ab, ac = b - a, c - a
        n = np.linalg.norm(np.cross(ab, ac), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.linalg.norm(ab, axis=1) * np.linalg.norm(ac, axis=1) * np.linalg.norm(c - b, axis=1) / (2 * n)
        best = np.fmin(best, np.where(np.isfinite(r) & (n > 0), r, np.inf))
    return best


class AlphaComplex:
    """Delaunay tetrahedralization with circumradii, reusable across alpha values."""

    def __init__(self, points, point_ids=None):
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        _check_solid(P)
        self.points = P
        self.point_ids = np.arange(len(P)) if point_ids is None else np.asarray(point_ids)
        try:
            tri = Delaunay(P)
        except QhullError as e:
            raise DegenerateInput(str(e)) from e
        self.simplices = tri.simplices
        self.neighbors = tri.neighbors
        a = P[self.simplices[:, 0]]
        u, v, w = (P[self.simplices[:, k]] - a for k in (1, 2, 3))
        vw, wu, uv = np.cross(v, w), np.cross(w, u), np.cross(u, v)
        det = np.einsum("ij,ij->i", u, vw)
        self.volumes = np.abs(det) / 6.0
        num = (u * u).sum(1)[:, None] * vw + (v * v).sum(1)[:, None] * wu + (w * w).sum(1)[:, None] * uv
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.linalg.norm(num, axis=1) / np.abs(2.0 * det)
        scale = np.max([(u * u).sum(1), (v * v).sum(1), (w * w).sum(1)], axis=0) ** 1.5
        flat = ~np.isfinite(r) | (np.abs(det) <= 1e-12 * scale)
        # flat tetrahedra come from cocircular points; use the radius of their common circle
        r[flat] = _min_face_circumradius(P[self.simplices[flat]])
        self.circumradii = np.where(np.isfinite(r), r, np.inf)

    def shape(self, alpha: float, min_component_fraction: float = 0.01) -> AlphaShape3D:
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        keep = np.flatnonzero(self.circumradii <= alpha)
        if not len(keep):
            return AlphaShape3D(self.point_ids, alpha, np.zeros((0, 4), int), np.zeros(0, int), np.zeros(0), 0.0)
        local = np.full(len(self.simplices), -1)
        local[keep] = np.arange(len(keep))
        nb = local[np.where(self.neighbors[keep] >= 0, self.neighbors[keep], 0)]
        nb[self.neighbors[keep] < 0] = -1
        i, k = np.nonzero(nb >= 0)
        g = coo_matrix((np.ones(len(i)), (i, nb[i, k])), shape=(len(keep), len(keep)))
        _, labels = connected_components(g, directed=False)
        comp_vol = np.bincount(labels, weights=self.volumes[keep])
        good = comp_vol >= min_component_fraction * comp_vol.max()
        sel = good[labels]
        remap = np.cumsum(good) - 1
        return AlphaShape3D(self.point_ids, float(alpha), self.simplices[keep[sel]], remap[labels[sel]],
                            comp_vol[good], float(comp_vol[good].sum()))


def alpha_shape_volume(points, alpha: float, min_component_fraction: float = 0.01) -> tuple:
    """Alpha-shape volume: Delaunay tetrahedra with circumradius at most ``alpha``.

    Face-connected components smaller than ``min_component_fraction`` of the
    largest one are dropped.

    Returns
    -------
    (float, AlphaShape3D)

    Raises
    ------
    DegenerateInput
        Fewer than four affinely independent points.
    """
    s = AlphaComplex(points).shape(alpha, min_component_fraction)
    return s.volume, s


def alpha_sweep(points, alphas, min_component_fraction: float = 0.01) -> np.ndarray:
    """Alpha-shape volumes for several radii from a single triangulation."""
    cx = AlphaComplex(points)
    return np.array([cx.shape(a, min_component_fraction).volume for a in alphas])


def _vertical_distance(points, origin, up):
    D = np.asarray(points, dtype=float) - origin
    return np.linalg.norm(D - np.outer(D @ up, up), axis=1)


def cylinder_model_volume(points, ground: Plane, trunk_origin, radius_mode: str = "circumscribing") -> float:
    """``pi R^2 H`` about the vertical (ground normal) through ``trunk_origin``.

    ``H`` is the maximum height above ground. ``R`` is the maximum radial
    distance, or the mean with ``radius_mode="mean"``.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    h = ground.signed_distance(P)
    P = P[h > 0]
    if not len(P):
        raise EmptyTree("no points above ground")
    r = _vertical_distance(P, np.asarray(trunk_origin, dtype=float), ground.normal)
    R = r.max() if radius_mode == "circumscribing" else r.mean()
    return float(np.pi * R ** 2 * h.max())


def tree_height(points, ground: Plane, trunk_origin=None, r_pole: Optional[float] = None,
                percentile: float = 95.0) -> float:
    """Maximum signed distance above the ground plane.

    With ``r_pole`` set, points within ``r_pole`` of the vertical through
    ``trunk_origin`` and above the ``percentile`` height are dropped first.

    Raises
    ------
    EmptyTree
        No point lies above the ground.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    h = ground.signed_distance(P)
    if not np.any(h > 0):
        raise EmptyTree("no points above ground")
    if r_pole is not None:
        if trunk_origin is None:
            raise ValueError("pole exclusion needs the trunk origin")
        cut = np.percentile(h[h > 0], percentile)
        pole = (_vertical_distance(P, np.asarray(trunk_origin, dtype=float), ground.normal) <= r_pole) & (h > cut)
        h = h[~pole]
    return float(h.max())


# -- report ------------------------------------------------------------------------------------


@dataclass
class MorphologyConfig:
    alpha: float = 0.8
    min_component_fraction: float = 0.01
    bin_width: float = 0.05
    window: float = 0.5
    end_margin: Optional[float] = None  # None: half the median trunk gap
    ground_clearance: float = 0.05
    pole_exclusion: bool = False
    r_pole: float = 0.05
    pole_percentile: float = 95.0
    radius_mode: str = "circumscribing"
    max_points: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.bin_width <= 0 or not 0 < self.window <= 1:
            raise ValueError("alpha and bin_width must be positive and window in (0, 1]")
        if self.radius_mode not in ("circumscribing", "mean"):
            raise ValueError("radius_mode must be circumscribing or mean")


@dataclass
class TreeRecord:
    tree_id: int
    trunk_object_id: int
    ground_object_id: int
    cut_left: float = np.nan
    cut_right: float = np.nan
    member_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    trunk_diameter: float = np.nan
    height: float = np.nan
    volume_alpha: float = np.nan
    volume_hull: float = np.nan
    volume_cylinder: float = np.nan
    error: Optional[str] = None

    def row(self, alpha: float) -> tuple:
        return (self.tree_id, self.trunk_diameter, self.height, self.volume_alpha, self.volume_hull,
                self.volume_cylinder, alpha)


@dataclass
class MorphologyReport:
    alpha: float
    trees: list  # TreeRecord sorted by tree id

    def rows(self) -> list:
        return [t.row(self.alpha) for t in self.trees]

    def to_dict(self) -> dict:
        out = []
        for t in self.trees:
            d = asdict(t)
            d["n_members"] = int(len(t.member_ids))
            del d["member_ids"]
            out.append({k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in d.items()})
        return {"alpha_m": self.alpha, "columns": list(REPORT_COLUMNS), "trees": out}

    def record(self, tree_id: int) -> TreeRecord:
        for t in self.trees:
            if t.tree_id == tree_id:
                return t
        raise KeyError(tree_id)


def _subsample(P, n, rng):
    if len(P) <= n:
        return P
    return P[np.sort(rng.choice(len(P), n, replace=False))]


@dataclass
class MeasureInput:
    """Everything :func:`measure_trees` needs, in the merged (front) frame."""

    points: np.ndarray  # (n, 3)
    tree_ids: list
    trunks: list  # Cylinder per tree
    diameters: list
    grounds: list  # Plane per tree, normal pointing up
    travel: np.ndarray  # camera travel direction, used when only one tree exists
    ground_ids: Optional[list] = None  # ground object per tree, -1 for the shared fallback plane


def measurement_input(model) -> MeasureInput:
    """Collect points, trunk fits and local grounds from a merged model."""
    from .merge import trunk_offsets

    objs = {(o.kind, o.object_id): o for o in model.objects}
    trunk_ids = sorted(c.front_object_id for c in model.correspondences if c.kind == "cylinder")
    if any(t not in model.trunk_fits for t in trunk_ids):
        trunk_offsets(model)
    planes = [o.geometry() for o in model.objects if o.kind == "plane"]
    if not planes:
        raise InsufficientData("the merged model has no ground plane")
    up = _unit(np.mean([p.normal for p in planes], axis=0))
    ground_of = {g.trunk_id: g.object_id for g in model.grounds["front"] if ("plane", g.object_id) in objs}
    grounds = []
    for tid in trunk_ids:
        g = objs[("plane", ground_of[tid])].geometry() if tid in ground_of else Plane(up, planes[0].origin)
        grounds.append(g if g.normal @ up >= 0 else Plane(-g.normal, g.origin, g.slab_halfwidth))
    C = model.front.camera_centers()
    travel = C[-1] - C[0] if len(C) > 1 else np.cross(up, [1.0, 0.0, 0.0])
    return MeasureInput(model.points()[0], trunk_ids, [model.trunk_fits[t][0] for t in trunk_ids],
                        [float(model.trunk_fits[t][2]) for t in trunk_ids], grounds, travel,
                        [ground_of.get(t, -1) for t in trunk_ids])


def measure_all(model, cfg: MorphologyConfig = None) -> MorphologyReport:
    """Measure every corresponded trunk of a merged model; see :func:`measure_trees`."""
    return measure_trees(measurement_input(model), cfg)


def measure_trees(inp: MeasureInput, cfg: MorphologyConfig = None) -> MorphologyReport:
    """Segment the row and measure each tree.

    Diameters are taken from the input trunk fits. Failures are recorded on
    the tree's record and do not affect other trees.
    """
    cfg = cfg or MorphologyConfig()
    if not inp.tree_ids:
        raise InsufficientData("no trees to measure")
    up = _unit(np.mean([g.normal for g in inp.grounds], axis=0))
    recs, origins = [], []
    ground_ids = inp.ground_ids if inp.ground_ids is not None else [-1] * len(inp.tree_ids)
    for tid, cyl, diam, ground, gid in zip(inp.tree_ids, inp.trunks, inp.diameters, inp.grounds, ground_ids):
        rec = TreeRecord(tid, tid, gid)
        rec.trunk_diameter = diam
        # trunk axis meets the ground
        t = -ground.signed_distance(cyl.origin[None])[0] / (cyl.axis @ ground.normal)
        origins.append(cyl.origin + t * cyl.axis)
        recs.append(rec)
    grounds = list(inp.grounds)
    X = np.asarray(inp.points, dtype=float)
    if len(recs) >= 2:
        track = fit_row_track(origins, up)
        order = np.argsort(track.along(np.array(origins)), kind="stable")
    else:
        d = np.asarray(inp.travel, dtype=float)
        track = RowTrack(origins[0], _unit(d - (d @ up) * up), up)
        order = np.arange(1)
    recs = [recs[i] for i in order]
    origins = np.array([origins[i] for i in order])
    grounds = [grounds[i] for i in order]
    st = track.along(origins)
    margin = cfg.end_margin if cfg.end_margin is not None else (0.5 * float(np.median(np.diff(st))) if len(st) > 1 else 1.0)

    # drop ground points using the ground of the nearest trunk along the track
    near = np.abs(track.along(X)[:, None] - st[None]).argmin(axis=1)
    h = np.empty(len(X))
    for i, g in enumerate(grounds):
        m = near == i
        h[m] = g.signed_distance(X[m])
    above = np.flatnonzero(h > cfg.ground_clearance)

    segs = segment_trees(X[above], origins, track, [r.tree_id for r in recs], bin_width=cfg.bin_width,
                         window=cfg.window, end_margin=margin)
    rng = np.random.default_rng(cfg.seed)
    for rec, seg, o, g in zip(recs, segs, origins, grounds):
        rec.cut_left, rec.cut_right = seg.cut_left, seg.cut_right
        rec.member_ids = above[seg.member_ids]
        try:
            P = X[rec.member_ids]
            P = P[g.signed_distance(P) > cfg.ground_clearance]
            rec.height = tree_height(P, g, o, cfg.r_pole if cfg.pole_exclusion else None, cfg.pole_percentile)
            Q = _subsample(P, cfg.max_points, rng)
            rec.volume_alpha = alpha_shape_volume(Q, cfg.alpha, cfg.min_component_fraction)[0]
            rec.volume_hull = convex_hull_volume(Q)
            rec.volume_cylinder = cylinder_model_volume(Q, g, o, cfg.radius_mode)
        except TreeMorphError as e:
            rec.error = f"{type(e).__name__}: {e}"
            log.warning("tree %d: %s", rec.tree_id, rec.error)
    return MorphologyReport(cfg.alpha, sorted(recs, key=lambda r: r.tree_id))
