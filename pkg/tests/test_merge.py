import numpy as np
import pytest

from treemorph.errors import DegenerateConfiguration, InsufficientData
from treemorph.geometry import Cylinder, Plane, RigidTransform
from treemorph.merge import (
    MergeConfig,
    ObjectCorrespondence,
    alignment_cost,
    merge_sides,
    refine_transform,
    semantic_cost,
    solve_initial_transform,
)
from treemorph.recon import reconstruct_side
from treemorph.scenegen import DriftSpec, NoiseSpec, SceneSpec, TrajectorySpec, generate_scene

T_FB = RigidTransform.from_vector([0.02, -0.01, 3.1, 0.5, 4.8, 0.03])


def row_objects(n_trees=3, tilt=0.03, seed=0):
    """Front-frame trunks and a ground plane, plus their back-frame copies."""
    rng = np.random.default_rng(seed)
    front = {}
    for i in range(n_trees):
        axis = np.array([rng.normal(scale=tilt), rng.normal(scale=tilt), 1.0])
        front[("cylinder", i)] = Cylinder(axis, [1.2 * i, 0.0, 0.3], 0.03)
    front[("plane", 100)] = Plane(np.array([0.01, 0.02, 1.0]) / np.linalg.norm([0.01, 0.02, 1.0]), [1.2, 0, 0])
    inv = T_FB.inverse()
    back = {k: g.transformed(inv) for k, g in front.items()}
    corr = [ObjectCorrespondence(i, i, "cylinder") for i in range(n_trees)] + [ObjectCorrespondence(100, 100, "plane")]
    return corr, front, back


class TestInitialTransform:
    def test_exact_when_noiseless(self):
        corr, f, b = row_objects()
        T = solve_initial_transform(corr, f, b)
        assert np.abs(T.as_matrix() - T_FB.as_matrix()).max() < 1e-9

    def test_flipped_back_axes(self):
        corr, f, b = row_objects()
        for k, g in list(b.items()):
            if k[0] == "cylinder":
                b[k] = Cylinder(-g.axis, g.origin, g.radius)
        T = solve_initial_transform(corr, f, b)
        assert np.abs(T.as_matrix() - T_FB.as_matrix()).max() < 1e-9

    def test_needs_two_cylinders_and_a_plane(self):
        corr, f, b = row_objects()
        with pytest.raises(DegenerateConfiguration):
            solve_initial_transform(corr[:1] + corr[-1:], f, b)
        with pytest.raises(DegenerateConfiguration):
            solve_initial_transform(corr[:-1], f, b)

    def test_coaxial_cylinders_are_degenerate(self):
        # rotation about the shared axis is free
        f = {("cylinder", 0): Cylinder([0, 0, 1.0], [0, 0, 0.0], 0.03),
             ("cylinder", 1): Cylinder([0, 0, 1.0], [0, 0, 1.0], 0.03),
             ("plane", 2): Plane(np.array([0, 0, 1.0]), [0, 0, 0.0])}
        b = {k: g.transformed(T_FB.inverse()) for k, g in f.items()}
        corr = [ObjectCorrespondence(0, 0, "cylinder"), ObjectCorrespondence(1, 1, "cylinder"),
                ObjectCorrespondence(2, 2, "plane")]
        with pytest.raises(DegenerateConfiguration):
            solve_initial_transform(corr, f, b)

    def test_unfitted_object(self):
        corr, f, b = row_objects()
        del b[("cylinder", 1)]
        with pytest.raises(InsufficientData):
            solve_initial_transform(corr, f, b)

    def test_refine_lowers_cost_under_noise(self):
        rng = np.random.default_rng(3)
        corr, f, b = row_objects(5)
        for k, g in list(b.items()):
            if k[0] == "cylinder":
                b[k] = Cylinder(g.axis + rng.normal(scale=0.01, size=3), g.origin + rng.normal(scale=0.01, size=3),
                                g.radius)
        T0 = solve_initial_transform(corr, f, b)
        T1, rep = refine_transform(corr, f, b, T0)
        assert alignment_cost(corr, f, b, T1) <= alignment_cost(corr, f, b, T0)
        assert rep.final_cost <= rep.initial_cost


@pytest.fixture(scope="module")
def drifted_pair():
    spec = SceneSpec(n_trees=4, canopy_points=300, noise=NoiseSpec(pixel_sigma=0.5, depth_sigma=0.003, line_sigma=1.0),
                     front=TrajectorySpec(n_frames=60), back=TrajectorySpec(n_frames=60, drift=DriftSpec(0.05, 1.0)))
    scene, truth = generate_scene(spec)
    sides = {}
    for name in ("front", "back"):
        d = getattr(scene, name)
        sides[name] = (d, reconstruct_side(d.to_reconstruction(), d.loops))
    return scene, truth, sides


def run_merge(drifted_pair, stages=("initial", "refined", "sba")):
    scene, _, sides = drifted_pair
    (fd, front), (bd, back) = sides["front"], sides["back"]
    return merge_sides(front, back, scene.correspondences, {"front": fd.trunks, "back": bd.trunks},
                       {"front": fd.grounds, "back": bd.grounds}, MergeConfig(), stages=stages)


@pytest.fixture(scope="module")
def merged(drifted_pair):
    return run_merge(drifted_pair)


class TestMergeSides:
    def test_stage_metrics_recorded(self, merged):
        model = merged
        stages = [s for s, _, _ in model.stage_metrics]
        assert stages == ["initial"] * 4 + ["refined"] * 4 + ["sba"] * 4
        assert set(model.stage_transforms) == {"initial", "refined", "sba"}

    def test_sba_reduces_trunk_offsets(self, merged):
        worst = {s: max(o for st, _, o in merged.stage_metrics if st == s) for s in ("initial", "sba")}
        assert worst["sba"] < worst["initial"]

    def test_sba_reduces_semantic_cost(self, drifted_pair, merged):
        before = run_merge(drifted_pair, ("initial", "refined"))
        cfg = MergeConfig()
        assert semantic_cost(merged, cfg) < semantic_cost(before, cfg)

    def test_early_stop_keeps_objects(self, drifted_pair):
        model = run_merge(drifted_pair, ("initial",))
        assert len(model.objects) > 0
        assert "refined" not in model.stage_transforms
