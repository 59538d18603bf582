"""Three ways to measure a canopy.

A bounding cylinder, the convex hull and the alpha shape nest inside one
another for every tree. Growing alpha fills in the alpha shape until it
approaches the hull; the last column shows how far it still is at 5 m.

Run: python demos/canopy_volumes.py
"""
import numpy as np

from treemorph.morphology import alpha_sweep, convex_hull_volume, cylinder_model_volume
from treemorph.scenegen import LABELS, SceneSpec, TrajectorySpec, generate_scene


def main():
    spec = SceneSpec(n_trees=4, front=TrajectorySpec(n_frames=60), back=TrajectorySpec(n_frames=60))
    scene, truth = generate_scene(spec)
    alphas = [0.2, 0.4, 0.8, 1.6, 5.0]
    print("tree  true   cyl    hull   " + "  ".join(f"a={a:<4g}" for a in alphas) + "  hull gap at 5 m")
    for i, tree in enumerate(truth.trees):
        pts = []
        for name in ("front", "back"):
            d = getattr(scene, name)
            rec = d.to_reconstruction()
            rec.poses[:] = truth.true_poses[name]
            keep = (d.dense.tree == i) & np.isin(d.dense.label, [LABELS["trunk"], LABELS["canopy"]])
            to_world = truth.side_from_world[name].inverse()
            pts.append(to_world.apply(rec.dense_world(keep)))
        P = np.vstack(pts)
        hull = convex_hull_volume(P)
        cyl = cylinder_model_volume(P, tree.ground_plane, tree.base)
        sweep = alpha_sweep(P, alphas)
        print(f"{i:4d}  {truth.volumes[i]:.3f}  {cyl:.3f}  {hull:.3f}  " + "  ".join(f"{v:6.3f}" for v in sweep)
              + f"  {(hull - sweep[-1]) / hull:.2%}")


if __name__ == "__main__":
    main()
