"""On-disk layout of scenes, reconstructions and merged models.

Scene directory::

    spec.json  correspondences.json  ground_truth.json
    front/ back/   side.json tracks.csv dense.ply loops.json annotations.json

``reconstruct`` adds ``trajectory.txt`` and ``landmarks.ply`` to a side
directory. A merged directory holds ``transform.txt``, ``merged.ply``,
``objects.json``, ``stage_metrics.csv`` and one trajectory per side.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import Cylinder, Intrinsics, Plane, RigidTransform
from .io import (
    read_json,
    read_ply,
    read_table,
    read_trajectory,
    write_json,
    write_ply,
    write_table,
    write_trajectory,
    write_transform,
)
from .merge import MergedModel
from .morphology import MeasureInput, measurement_input
from .recon import CameraRig, DenseCloud, LoopCandidate, ReconstructionSide
from .scenegen import GroundTruth, Scene, SideData
from .semantics import GroundAnnotation, TrunkAnnotation

__all__ = [
    "SIDE_FILES",
    "write_scene",
    "write_side",
    "read_side",
    "read_correspondences",
    "write_reconstruction",
    "read_reconstruction",
    "write_merged",
    "read_measure_input",
]

SIDE_FILES = ("side.json", "tracks.csv", "dense.ply", "loops.json", "annotations.json")
TRACK_COLUMNS = ("frame", "landmark", "u", "v", "x", "y", "z", "valid")


def _rig_to_dict(rig: CameraRig) -> dict:
    return {"K_o": rig.K_o.as_list(), "K_i": rig.K_i.as_list(), "T_io": rig.T_io.as_matrix()[:3].tolist(),
            "width": rig.width, "height": rig.height}


def _rig_from_dict(d: dict) -> CameraRig:
    M = np.eye(4)
    M[:3] = np.asarray(d["T_io"], dtype=float)
    return CameraRig(Intrinsics(*d["K_o"]), Intrinsics(*d["K_i"]), RigidTransform.from_matrix(M),
                     int(d["width"]), int(d["height"]))


def write_side(path, side: SideData) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_json(path / "side.json", {"side": side.side, "n_frames": side.n_frames, "rig": _rig_to_dict(side.rig)})
    rows = zip(side.obs_frame, side.obs_landmark, *side.obs_pixel.T, *side.obs_point.T, side.obs_valid)
    write_table(path / "tracks.csv", TRACK_COLUMNS, rows)
    d = side.dense
    write_ply(path / "dense.ply", {"frame": d.frame, "x": d.point_cam[:, 0], "y": d.point_cam[:, 1],
                                   "z": d.point_cam[:, 2], "label": d.label, "tree": d.tree},
              comments=("points in the camera frame of their frame index",))
    loops = []
    for c in side.loops:
        loops.append({"frame_a": c.frame_a, "frame_b": c.frame_b, "points_a": c.points_a, "points_b": c.points_b,
                      "landmark_a": c.landmark_a, "landmark_b": c.landmark_b})
    write_json(path / "loops.json", {"loops": loops})
    trunks = [{"object_id": t.object_id, "side": t.side, "frames": [
        {"frame_id": f["frame_id"], "member_ids": np.asarray(f["member_ids"]), "lines": np.asarray(f["lines"])}
        for f in t.frames]} for t in side.trunks]
    grounds = [{"object_id": g.object_id, "side": g.side, "frame_id": g.frame_id, "candidate_ids": g.candidate_ids,
                "trunk_id": g.trunk_id} for g in side.grounds]
    write_json(path / "annotations.json", {"trunks": trunks, "grounds": grounds})


def _opt_array(v, dtype):
    return None if v is None else np.asarray(v, dtype=dtype)


def read_side(path) -> SideData:
    """Load a side directory; a missing file raises :class:`InputError` naming it."""
    path = Path(path)
    if not path.is_dir():
        raise InputError(f"missing side directory: {path}")
    meta = read_json(path / "side.json")
    header, T = read_table(path / "tracks.csv")
    if tuple(header) != TRACK_COLUMNS:
        raise InputError(f"{path / 'tracks.csv'}: unexpected columns {header}")
    ply = read_ply(path / "dense.ply")
    dense = DenseCloud(ply["frame"], np.c_[ply["x"], ply["y"], ply["z"]], ply["label"], ply["tree"])
    loops = [LoopCandidate(int(c["frame_a"]), int(c["frame_b"]), np.asarray(c["points_a"], float).reshape(-1, 3),
                           np.asarray(c["points_b"], float).reshape(-1, 3), _opt_array(c["landmark_a"], np.int64),
                           _opt_array(c["landmark_b"], np.int64)) for c in read_json(path / "loops.json")["loops"]]
    ann = read_json(path / "annotations.json")
    try:
        trunks = [TrunkAnnotation(t["object_id"], t["side"], [
            {"frame_id": f["frame_id"], "member_ids": np.asarray(f["member_ids"], np.int64),
             "lines": [tuple(l) for l in f["lines"]]} for f in t["frames"]]) for t in ann["trunks"]]
        grounds = [GroundAnnotation(g["object_id"], g["side"], g["frame_id"], g["candidate_ids"], g.get("trunk_id", -1))
                   for g in ann["grounds"]]
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path / 'annotations.json'}: {e}") from e
    return SideData(meta["side"], _rig_from_dict(meta["rig"]), int(meta["n_frames"]), T[:, 0].astype(np.int64),
                    T[:, 1].astype(np.int64), T[:, 2:4].copy(), T[:, 4:7].copy(), T[:, 7].astype(bool), dense, loops,
                    trunks, grounds)


def write_scene(path, scene: Scene, truth: GroundTruth) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_json(path / "spec.json", {"spec": scene.spec.to_dict()})
    write_json(path / "correspondences.json", {"correspondences": list(scene.correspondences)})
    write_json(path / "ground_truth.json", truth.to_dict())
    write_side(path / "front", scene.front)
    write_side(path / "back", scene.back)


def read_correspondences(path) -> list:
    doc = read_json(path)
    try:
        return [{"front_object_id": int(c["front_object_id"]), "back_object_id": int(c["back_object_id"]),
                 "kind": str(c["kind"])} for c in doc["correspondences"]]
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path}: malformed correspondence: {e}") from e


def write_reconstruction(path, side: ReconstructionSide) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_trajectory(path / "trajectory.txt", np.arange(len(side.poses)), side.poses)
    L = side.landmarks
    write_ply(path / "landmarks.ply", {"id": np.arange(len(L)), "x": L[:, 0], "y": L[:, 1], "z": L[:, 2]})


def read_reconstruction(path) -> tuple[SideData, ReconstructionSide]:
    """Side inputs plus the stored trajectory and landmarks."""
    path = Path(path)
    data = read_side(path)
    rec = data.to_reconstruction()
    ids, poses = read_trajectory(path / "trajectory.txt")
    if len(ids) != data.n_frames or np.any(ids != np.arange(data.n_frames)):
        raise InputError(f"{path / 'trajectory.txt'}: expected frames 0..{data.n_frames - 1}")
    rec.poses = poses
    ply = read_ply(path / "landmarks.ply")
    rec.landmarks = np.zeros((int(ply["id"].max()) + 1 if len(ply["id"]) else 0, 3))
    rec.landmarks[ply["id"]] = np.c_[ply["x"], ply["y"], ply["z"]]
    return data, rec


def _cyl_dict(c: Cylinder) -> dict:
    return {"axis": c.axis, "origin": c.origin, "radius": c.radius, "height": c.height}


def _plane_dict(p: Plane) -> dict:
    return {"normal": p.normal, "origin": p.origin, "slab_halfwidth": p.slab_halfwidth}


def write_merged(path, model: MergedModel, stage: str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_transform(path / "transform.txt", model.T_FB)
    X, side, label, tree, ids = model.points()
    write_ply(path / "merged.ply", {"x": X[:, 0], "y": X[:, 1], "z": X[:, 2], "side": side, "label": label,
                                    "tree": tree, "dense_id": ids}, comments=("front frame; side 0 front, 1 back",))
    write_trajectory(path / "trajectory_front.txt", np.arange(len(model.front.poses)), model.front.poses)
    write_trajectory(path / "trajectory_back.txt", np.arange(len(model.back.poses)), model.back.poses)
    inp = measurement_input(model)
    trees = [{"tree_id": t, "trunk": _cyl_dict(c), "back_trunk": _cyl_dict(model.trunk_fits[t][1]), "diameter": d,
              "ground": _plane_dict(g), "ground_object_id": gid}
             for t, c, d, g, gid in zip(inp.tree_ids, inp.trunks, inp.diameters, inp.grounds, inp.ground_ids)]
    objects = [{"object_id": o.object_id, "kind": o.kind, "pose": o.pose, "shape": o.shape,
                "members": {k: np.asarray(v) for k, v in sorted(o.members.items())}} for o in model.objects]
    write_json(path / "objects.json", {
        "stage": stage,
        "T_FB": model.T_FB.as_matrix()[:3],
        "stage_transforms": {k: v.as_matrix()[:3] for k, v in model.stage_transforms.items()},
        "travel": inp.travel,
        "trees": trees,
        "objects": objects,
    })
    write_table(path / "stage_metrics.csv", ("stage", "tree_id", "offset_m"), model.stage_metrics)


def read_measure_input(path) -> MeasureInput:
    path = Path(path)
    if not path.is_dir():
        raise InputError(f"missing merged directory: {path}")
    ply = read_ply(path / "merged.ply")
    doc = read_json(path / "objects.json")
    try:
        trees = doc["trees"]
        return MeasureInput(
            np.c_[ply["x"], ply["y"], ply["z"]],
            [int(t["tree_id"]) for t in trees],
            [Cylinder(**t["trunk"]) for t in trees],
            [float(t["diameter"]) for t in trees],
            [Plane(**t["ground"]) for t in trees],
            np.asarray(doc["travel"], dtype=float),
            [int(t.get("ground_object_id", -1)) for t in trees],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path / 'objects.json'}: {e}") from e
