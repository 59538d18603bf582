import filecmp

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from treemorph.errors import BadSpec
from treemorph.geometry import RigidTransform
from treemorph.scenefiles import write_scene
from treemorph.scenegen import (
    LABELS,
    DriftSpec,
    SceneSpec,
    TrajectorySpec,
    generate_scene,
    inject_drift,
    splitmix64,
    sub_rng,
)


def small_spec(**kw):
    base = dict(n_trees=2, canopy_points=200, front=TrajectorySpec(n_frames=20), back=TrajectorySpec(n_frames=20))
    base.update(kw)
    return SceneSpec(**base)


def straight_path(n=51, length=10.0):
    """World->camera poses with identity rotation moving along +x."""
    c = np.c_[np.linspace(0, length, n), np.zeros(n), np.zeros(n)]
    return np.c_[np.zeros((n, 3)), -c], c


def centres(poses):
    return np.array([RigidTransform.from_vector(p).inverse().translation for p in poses])


class TestDrift:
    def test_zero_drift_is_identity(self):
        P, _ = straight_path()
        assert np.allclose(inject_drift(P, DriftSpec()), P, atol=1e-15)

    def test_frame_zero_unchanged(self):
        P, _ = straight_path()
        assert np.array_equal(inject_drift(P, DriftSpec(0.1, 2.0))[0], P[0])

    def test_lateral_closed_form(self):
        # 2 cm per 10 m over a 10 m path displaces the last camera 2 cm to the left of travel
        P, c = straight_path(length=10.0)
        out = centres(inject_drift(P, DriftSpec(lateral_per_10m=0.02)))
        assert np.abs(out - (c + np.c_[np.zeros(len(c)), 0.02 * c[:, 0] / 10, np.zeros(len(c))])).max() < 1e-12

    def test_pure_yaw_ramp(self):
        P, c = straight_path(length=5.0)
        out = inject_drift(P, DriftSpec(yaw_deg_per_10m=3.0))
        for k in range(len(P)):
            R_cw = RigidTransform.from_vector(out[k]).inverse().rotation
            yaw = Rotation.from_matrix(R_cw).as_rotvec()[2]
            assert abs(yaw - np.radians(3.0) * c[k, 0] / 10) < 1e-12

    def test_combined_sequential_composition(self):
        P, c = straight_path(length=8.0)
        out = inject_drift(P, DriftSpec(0.05, 2.0))
        s = c[-1, 0]
        psi = np.radians(2.0) * s / 10
        R = Rotation.from_rotvec([0, 0, psi]).as_matrix()
        # rotate about the first centre (the origin), then shift sideways
        expected_centre = R @ c[-1] + [0, 0.05 * s / 10, 0]
        got = RigidTransform.from_vector(out[-1]).inverse()
        assert np.abs(got.translation - expected_centre).max() < 1e-12
        assert np.abs(got.rotation - R).max() < 1e-12


class TestSeeds:
    def test_splitmix_known_value(self):
        # first output of the reference splitmix64 stream seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_sub_rng_independent_paths(self):
        a = sub_rng(5, 1, 0).random(3)
        b = sub_rng(5, 1, 1).random(3)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, sub_rng(5, 1, 0).random(3))

    def test_tree_independent_of_count(self):
        _, t3 = generate_scene(small_spec(n_trees=3, spacing=1.2))
        _, t4 = generate_scene(small_spec(n_trees=4, spacing=1.2))
        assert t3.diameters[0] == t4.diameters[0]


class TestGenerate:
    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            write_scene(tmp_path / d, *generate_scene(small_spec(seed=4)))
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for sub in ("front", "back"):
            c = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
            assert not c.diff_files

    def test_seed_changes_output(self):
        _, a = generate_scene(small_spec(seed=1))
        _, b = generate_scene(small_spec(seed=2))
        assert not np.array_equal(a.diameters, b.diameters)

    def test_noiseless_observations_reproject(self):
        scene, _ = generate_scene(small_spec())
        s = scene.front
        K = s.rig.K_o
        X = s.obs_point[s.obs_valid]
        uv = np.c_[K.fx * X[:, 0] / X[:, 2] + K.cx, K.fy * X[:, 1] / X[:, 2] + K.cy]
        assert np.abs(uv - s.obs_pixel[s.obs_valid]).max() < 1e-10

    def test_labels_exclusive_and_known(self):
        scene, _ = generate_scene(small_spec())
        for s in (scene.front, scene.back):
            assert set(np.unique(s.dense.label)) <= set(LABELS.values())
            trunk = s.dense.label == LABELS["trunk"]
            assert np.all(s.dense.tree[trunk] >= 0)

    def test_correspondences_cover_every_tree(self):
        scene, truth = generate_scene(small_spec(n_trees=3))
        kinds = [c["kind"] for c in scene.correspondences]
        assert kinds.count("cylinder") == 3 and kinds.count("plane") == 3
        assert len(truth.diameters) == 3

    def test_scene_drift_endpoint(self):
        # lateral drift only: the endpoint gap is the rate times the path length walked
        spec = small_spec(back=TrajectorySpec(n_frames=20, drift=DriftSpec(lateral_per_10m=0.02)))
        _, truth = generate_scene(spec)
        c_true = centres(truth.true_poses["back"])
        c_drift = centres(truth.drifted_poses["back"])
        s = np.linalg.norm(np.diff(c_true, axis=0), axis=1).sum()
        assert abs(np.linalg.norm(c_drift[-1] - c_true[-1]) - 0.02 * s / 10) < 1e-6

    def test_true_transform_consistent(self):
        _, truth = generate_scene(small_spec())
        S = truth.side_from_world
        assert np.allclose(truth.T_FB.as_matrix(), (S["front"] @ S["back"].inverse()).as_matrix())


class TestBadSpec:
    @pytest.mark.parametrize("doc,key", [
        ({"n_trees": 0}, "n_trees"),
        ({"spacing": -1.0}, "spacing"),
        ({"colour": "green"}, "colour"),
        ({"noise": {"pixel_sigma": -0.1}}, "pixel_sigma"),
        ({"front": {"n_frames": 1}}, "n_frames"),
        ({"ground": "hilly"}, "ground"),
        ({"trunk_radius": [0.05, 0.02]}, "trunk_radius"),
    ])
    def test_names_offending_key(self, doc, key):
        with pytest.raises(BadSpec, match=key):
            SceneSpec.from_dict(doc)

    def test_round_trip(self):
        spec = small_spec(seed=9)
        assert SceneSpec.from_dict(spec.to_dict()) == spec
