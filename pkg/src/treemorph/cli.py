"""Command line driver: ``treemorph {synth,reconstruct,merge,measure,sweep}``.

Exit codes: 0 success, 2 input error, 3 degenerate geometry, 4 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

log = logging.getLogger("treemorph")

__all__ = ["main", "build_parser", "cmd_synth", "cmd_reconstruct", "cmd_merge", "cmd_measure", "run_pipeline",
           "cmd_sweep"]


def _config(args):
    from .config import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _read_spec(path):
    from .io import read_json
    from .scenegen import SceneSpec

    doc = read_json(path)
    body = doc.get("spec", {k: v for k, v in doc.items() if k != "schema_version"})
    return SceneSpec.from_dict(body)


def cmd_synth(spec_path, out, seed=None) -> Path:
    """Generate a synthetic scene directory from a spec file."""
    from .scenefiles import write_scene
    from .scenegen import generate_scene

    spec = _read_spec(spec_path)
    if seed is not None:
        spec = spec.replace(seed=seed)
    scene, truth = generate_scene(spec)
    write_scene(out, scene, truth)
    log.info("wrote scene with %d trees to %s", spec.n_trees, out)
    return Path(out)


def cmd_reconstruct(side_dir, cfg, side=None, out=None, use_loops=True) -> Path:
    """Single-side reconstruction; writes trajectory and landmarks."""
    from .errors import InputError
    from .recon import reconstruct_side
    from .scenefiles import read_side, write_reconstruction

    data = read_side(side_dir)
    if side is not None and data.side != side:
        raise InputError(f"{side_dir} holds the {data.side} side, not {side}")
    rcfg = cfg.recon_config()
    if not use_loops:
        rcfg.use_loops = False
    rec = reconstruct_side(data.to_reconstruction(), data.loops, rcfg)
    out = Path(out or side_dir)
    write_reconstruction(out, rec)
    log.info("%s: %d frames, %d landmarks, %d loop edges", data.side, len(rec.poses), len(rec.landmarks),
             len(rec.loop_edges))
    return out


_STAGES = {"initial": ("initial",), "refined": ("initial", "refined"), "sba": ("initial", "refined", "sba")}


def cmd_merge(front_dir, back_dir, corr_path, out, cfg, stage="sba"):
    """Align the two reconstructed sides and write the merged model."""
    from .merge import merge_sides
    from .scenefiles import read_correspondences, read_reconstruction, write_merged

    fd, front = read_reconstruction(front_dir)
    bd, back = read_reconstruction(back_dir)
    corr = read_correspondences(corr_path)
    model = merge_sides(front, back, corr, {"front": fd.trunks, "back": bd.trunks},
                        {"front": fd.grounds, "back": bd.grounds}, cfg.merge_config(), stages=_STAGES[stage])
    write_merged(out, model, stage)
    for st, tid, off in model.stage_metrics:
        log.debug("stage %s tree %d offset %.4f m", st, tid, off)
    return model


def _parse_sweep(text):
    import numpy as np

    from .errors import InputError

    try:
        a, b, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise InputError(f"alpha sweep must look like start:stop:step, got {text!r}") from None
    if not (0 < a <= b and step > 0):
        raise InputError(f"bad alpha sweep {text!r}")
    n = int(np.floor((b - a) / step + 1e-9)) + 1
    return [round(a + i * step, 12) for i in range(n)]


def cmd_measure(merged_dir, cfg, out=None, alpha=None, alpha_sweep=None):
    """Per-tree report (JSON and CSV) and an optional alpha sweep table."""
    import numpy as np

    from .io import fmt_float, write_json, write_table
    from .morphology import REPORT_COLUMNS, measure_trees
    from .scenefiles import read_measure_input

    inp = read_measure_input(merged_dir)
    mcfg = cfg.morphology_config()
    if alpha is not None:
        mcfg.alpha = alpha
    report = measure_trees(inp, mcfg)
    out = Path(out or merged_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report.to_dict())
    write_table(out / "report.csv", REPORT_COLUMNS, report.rows())
    if alpha_sweep:
        from .morphology import AlphaComplex

        alphas = _parse_sweep(alpha_sweep)
        X = np.asarray(inp.points)
        rows = []
        rng = np.random.default_rng(mcfg.seed)
        for rec in report.trees:
            if rec.error:
                continue
            ground = inp.grounds[inp.tree_ids.index(rec.tree_id)]
            P = X[rec.member_ids]
            P = P[ground.signed_distance(P) > mcfg.ground_clearance]
            if len(P) > mcfg.max_points:
                P = P[np.sort(rng.choice(len(P), mcfg.max_points, replace=False))]
            cx = AlphaComplex(P)
            rows.append([rec.tree_id] + [cx.shape(a, mcfg.min_component_fraction).volume for a in alphas])
        write_table(out / "alpha_sweep.csv", ["tree_id"] + [f"vol_alpha_{fmt_float(a)}" for a in alphas], rows)
    return report


def run_pipeline(spec_path, out, cfg, seed=None):
    """synth, reconstruct both sides, merge and measure into ``out``."""
    out = Path(out)
    cmd_synth(spec_path, out, seed)
    for side in ("front", "back"):
        cmd_reconstruct(out / side, cfg, side)
    cmd_merge(out / "front", out / "back", out / "correspondences.json", out / "merged", cfg)
    return cmd_measure(out / "merged", cfg)


def cmd_sweep(spec_path, out, cfg, seeds):
    """Run the full pipeline per seed and tabulate errors against ground truth."""
    from .io import read_json, write_table

    out = Path(out)
    rows = []
    for s in seeds:
        report = run_pipeline(spec_path, out / f"seed_{s}", cfg, seed=s)
        truth = {t["tree"]: t for t in read_json(out / f"seed_{s}" / "ground_truth.json")["trees"]}
        for rec in report.trees:
            t = truth[rec.tree_id]
            rows.append((s, rec.tree_id, rec.trunk_diameter - t["diameter"], rec.height - t["height"],
                         rec.volume_alpha, rec.volume_hull, rec.volume_cylinder, t["canopy_volume"]))
    write_table(out / "summary.csv", ("seed", "tree_id", "diameter_err_m", "height_err_m", "vol_alpha_m3",
                                      "vol_hull_m3", "vol_cyl_m3", "true_canopy_m3"), rows)
    return rows


def _seeds(text):
    if ":" in text:
        a, b = (int(x) for x in text.split(":"))
        return list(range(a, b))
    return [int(x) for x in text.split(",")]


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subparsers must not reset flags given before the verb
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", default=d(None), help="pipeline config (JSON or key = value)")
    g.add_argument("--seed", type=int, default=d(None), help="override the scene and pipeline seed")
    g.add_argument("--threads", type=int, default=d(None), help="BLAS thread limit")
    g.add_argument("--log-level", default=d("WARNING"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="treemorph", description="Two-side orchard row reconstruction and tree "
                                "morphology.", parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    s.add_argument("spec")
    s.add_argument("out")

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct one side")
    s.add_argument("side_dir")
    s.add_argument("--side", choices=["front", "back"])
    s.add_argument("--out")
    s.add_argument("--no-loop", action="store_true", help="skip loop closure")

    s = sub.add_parser("merge", parents=[common], help="align and jointly refine both sides")
    s.add_argument("front_dir")
    s.add_argument("back_dir")
    s.add_argument("correspondences")
    s.add_argument("--out", required=True)
    s.add_argument("--stage", choices=list(_STAGES), default="sba")

    s = sub.add_parser("measure", parents=[common], help="per-tree morphology report")
    s.add_argument("merged_dir")
    s.add_argument("--out")
    s.add_argument("--alpha", type=float)
    s.add_argument("--alpha-sweep", metavar="START:STOP:STEP")

    s = sub.add_parser("sweep", parents=[common], help="full pipeline over several seeds")
    s.add_argument("spec")
    s.add_argument("out")
    s.add_argument("--seeds", type=_seeds, default=[0], help="comma list or start:stop")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            logging.getLogger(__name__).warning("--threads needs the optional threadpoolctl package; ignored")
        else:
            limiter = threadpool_limits(args.threads)
    from .errors import TreeMorphError

    try:
        cfg = _config(args)
        if args.verb == "synth":
            cmd_synth(args.spec, args.out, args.seed)
        elif args.verb == "reconstruct":
            cmd_reconstruct(args.side_dir, cfg, args.side, args.out, not args.no_loop)
        elif args.verb == "merge":
            cmd_merge(args.front_dir, args.back_dir, args.correspondences, args.out, cfg, args.stage)
        elif args.verb == "measure":
            cmd_measure(args.merged_dir, cfg, args.out, args.alpha, args.alpha_sweep)
        elif args.verb == "sweep":
            cmd_sweep(args.spec, args.out, cfg, args.seeds)
    except TreeMorphError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


if __name__ == "__main__":
    sys.exit(main())
