"""Command-line entry point: ``featsplat <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("featsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(n):
    def parse(s):
        vals = [float(x) for x in s.replace(" ", "").split(",") if x]
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {s!r}")
        return np.array(vals)
    return parse


def _queries(values):
    out = []
    for v in values or []:
        out.extend(s.strip() for s in v.split(",") if s.strip())
    return out


def cmd_train_codec(a):
    from .codec import reconstruction_cosine, save_codec, train_codec
    from .dataset import ingest_dataset
    from .losses import LossWeights

    ds = ingest_dataset(a.dataset)
    feats = [f.features for f in ds.frames]
    res = train_codec(feats, a.latent_dim, LossWeights(kappa_g=a.kappa_g), epochs=a.epochs, lr=a.lr, seed=a.seed,
                      max_pixels=a.max_pixels)
    save_codec(res.codec, a.out)
    if a.trace:
        Path(a.trace).write_text("epoch,loss,best\n" + "".join(
            f"{i},{l:.9g},{b:.9g}\n" for i, (l, b) in enumerate(zip(res.losses, res.best))))
    print(f"codec: final loss {res.losses[-1]:.6g}, reconstruction cosine {reconstruction_cosine(res.codec, feats):.6f}")


def cmd_train(a):
    from .codec import load_codec
    from .dataset import ingest_dataset
    from .scene import load_scene, save_scene
    from .trainer import LossTrace, TrainConfig, init_scene, train_phase1, train_phase2

    cfg = TrainConfig.from_file(a.config) if a.config else TrainConfig()
    cfg.seed = a.seed
    if a.phase1_iters:
        cfg.phase1_iters = a.phase1_iters
    if a.phase2_iters:
        cfg.phase2_iters = a.phase2_iters
    ds = ingest_dataset(a.dataset, require_features=a.codec is not None)
    codec = load_codec(a.codec) if a.codec else None
    latent_dim = codec.latent_dim if codec else cfg.latent_dim
    scene = load_scene(a.init) if a.init else init_scene(ds, cfg.sh_degree, latent_dim)
    trace = LossTrace()
    if a.phase in ("1", "both"):
        scene, trace = train_phase1(scene, ds, cfg, trace=trace)
    if a.phase in ("2", "both") and codec is not None:
        scene, trace = train_phase2(scene, ds, codec, cfg, trace=trace)
    scene = scene.quantized()
    save_scene(scene, a.out)
    if a.trace:
        trace.write_csv(a.trace)
    print(f"trained scene: {len(scene)} Gaussians, sha256 {scene.digest()}")


def _render_outputs(scene, cam, stem: Path, buffers=None):
    from .imageio import write_featf1, write_ppm
    from .raster import render_view

    b = buffers or render_view(scene, cam)
    write_ppm(f"{stem}_rgb.ppm", b.rgb)
    write_ppm(f"{stem}_affordance.ppm", b.affordance)
    write_ppm(f"{stem}_alpha.ppm", b.alpha)
    write_featf1(f"{stem}_semantic.featf1", b.semantic)
    write_featf1(f"{stem}_depth.featf1", b.depth)
    return hashlib.sha256(np.ascontiguousarray(b.rgb, dtype="<f8").tobytes()).hexdigest()


def cmd_render(a):
    from .dataset import load_cameras
    from .scene import load_scene

    scene = load_scene(a.scene)
    cams = load_cameras(a.cameras)
    idx = range(len(cams)) if a.index is None else [a.index]
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in idx:
        h = _render_outputs(scene, cams[i], out / f"view_{i:04d}")
        print(f"view {i}: rgb sha256 {h}")


def _query_inputs(a):
    from .codec import load_codec
    from .query import QuerySet, TableEmbeddings
    from .scene import load_scene

    scene = load_scene(a.scene)
    codec = load_codec(a.codec)
    emb = TableEmbeddings.from_npz(a.embeddings) if a.embeddings.endswith(".npz") else \
        TableEmbeddings.from_tsv(a.embeddings)
    qs = QuerySet(_queries(a.positive), _queries(a.negative), a.threshold)
    return scene, codec, emb, qs


def cmd_query(a):
    from .dataset import load_cameras
    from .imageio import write_ppm
    from .query import relevancy_mask, render_similarity_map, save_mask

    scene, codec, emb, qs = _query_inputs(a)
    mask = relevancy_mask(scene, qs, emb, codec)
    save_mask(mask.indices, a.out)
    if a.cameras:
        out = Path(a.render_dir or Path(a.out).parent)
        out.mkdir(parents=True, exist_ok=True)
        for i, cam in enumerate(load_cameras(a.cameras)):
            write_ppm(out / f"similarity_{i:04d}.ppm", render_similarity_map(scene, cam, qs, emb, codec,
                                                                             scores=mask.scores))
    print(f"mask: {len(mask.indices)} of {len(scene)} Gaussians" + (" (empty)" if mask.empty else ""))


def cmd_edit(a):
    from .editor import RigidMotion, load_trajectory, move_and_infill, trajectory_motions
    from .query import load_mask
    from .scene import load_scene, save_scene

    scene = load_scene(a.scene)
    sel = load_mask(a.mask)
    if a.traj:
        motion = RigidMotion()
        for m in trajectory_motions(load_trajectory(a.traj)):
            motion = m.compose(motion)
    else:
        motion = RigidMotion(a.rotate_quat if a.rotate_quat is not None else [1.0, 0, 0, 0],
                             a.translate if a.translate is not None else np.zeros(3))
    out, inserted = move_and_infill(scene, sel, motion, infill=a.infill)
    save_scene(out, a.out)
    print(f"moved {len(sel)} Gaussians, inserted {len(inserted)}")


def cmd_infill(a):
    from .editor import infill_region
    from .query import load_mask
    from .scene import load_scene, save_scene

    scene = load_scene(a.scene)
    out, inserted = infill_region(scene, load_mask(a.mask))
    save_scene(out, a.out)
    print(f"removed {len(np.unique(load_mask(a.mask)))}, inserted {len(inserted)}; {len(out)} Gaussians")


def cmd_rank_grasps(a):
    from .grasp import GripperROI, load_candidates, rank_candidates, write_ranked
    from .query import load_mask
    from .scene import load_scene

    scene = load_scene(a.scene)
    sel = load_mask(a.mask) if a.mask else None
    ranked = rank_candidates(load_candidates(a.candidates), scene, GripperROI(a.roi_depth, a.roi_height), sel,
                             a.approach_axis, a.max_angle)
    write_ranked(a.out, ranked)
    if ranked:
        print(f"{len(ranked)} grasps ranked; best index {ranked[0].index} with nu {ranked[0].nu:.6f}")
    else:
        print("no grasps left after filtering")


def cmd_pipeline(a):
    from .pipeline import load_pipeline_config, run_pipeline

    cfg = load_pipeline_config(a.config)
    if a.output:
        cfg.output_dir = Path(a.output)
    for r in run_pipeline(cfg):
        print(f"stage {r.index}: selection {r.report['selection_size']}, top nu {r.report['top_nu']}, "
              f"output {r.report['output_sha256'][:16]}")


def cmd_export_pc(a):
    from .editor import export_pointcloud, write_pointcloud
    from .query import load_mask, similarity_scores
    from .scene import load_scene

    scene = load_scene(a.scene)
    sel = load_mask(a.mask) if a.mask else None
    scores = None
    if a.codec and a.embeddings and a.positive:
        _, codec, emb, qs = _query_inputs(a)
        scores = similarity_scores(scene, qs, emb, codec)
    pc = export_pointcloud(scene, sel, scores)
    write_pointcloud(pc, a.out)
    print(f"exported {len(pc)} points")


def cmd_grad_check(a):
    from . import synthetic
    from .dataset import load_cameras
    from .gradcheck import finite_diff_check
    from .scene import load_scene

    ok = True
    if a.scene:
        scene = load_scene(a.scene)
        cam = load_cameras(a.cameras)[a.index]
        jobs = [(scene, cam, synthetic.random_targets(cam.height, cam.width, scene.latent_dim, a.seed))]
    else:
        jobs = [synthetic.gradcheck_fixture(a.seed + i, a.max_gaussians, a.size) for i in range(a.scenes)]
    for i, (scene, cam, targets) in enumerate(jobs):
        rep = finite_diff_check(scene, cam, targets, h=a.step)
        print(f"-- scene {i} ({len(scene)} Gaussians)\n{rep.table()}")
        ok &= rep.passed
    if not ok:
        raise RuntimeError("gradient check failed")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="featsplat", description="Feature-distilled Gaussian splatting toolkit.")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train-codec", help="fit the feature autoencoder on a dataset's feature maps")
    s.add_argument("--dataset", required=True)
    s.add_argument("--latent-dim", type=int, default=3)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--kappa-g", type=float, default=1.0)
    s.add_argument("--max-pixels", type=int, default=8192)
    s.add_argument("--trace", help="CSV of per-epoch losses")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("train", help="optimise a scene on a dataset (phase 1, then phase 2 with --codec)")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", help="key = value training config")
    s.add_argument("--codec")
    s.add_argument("--init", help="start from this scene instead of the seed points")
    s.add_argument("--phase", choices=("1", "2", "both"), default="both")
    s.add_argument("--phase1-iters", type=int)
    s.add_argument("--phase2-iters", type=int)
    s.add_argument("--trace", help="CSV loss trace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render RGB/semantic/affordance/alpha/depth buffers")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--index", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_render)

    def query_args(s, required=True):
        s.add_argument("--codec", required=required)
        s.add_argument("--embeddings", required=required, help="TSV token<TAB>floats, or .npz")
        s.add_argument("--positive", action="append", required=required)
        s.add_argument("--negative", action="append")
        s.add_argument("--threshold", type=float, default=0.5)

    s = sub.add_parser("query", help="relevancy mask for an open-vocabulary query")
    s.add_argument("--scene", required=True)
    query_args(s)
    s.add_argument("--cameras", help="also render similarity maps for these cameras")
    s.add_argument("--render-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("edit", help="rigidly move a selection (optionally infilling what it leaves behind)")
    s.add_argument("--scene", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--translate", type=_floats(3))
    s.add_argument("--rotate-quat", type=_floats(4))
    s.add_argument("--traj", help="CSV rows t,m00..m33 of end-effector poses")
    s.add_argument("--infill", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("infill", help="remove a selection and infill the hole")
    s.add_argument("--scene", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infill)

    s = sub.add_parser("rank-grasps", help="rank grasp candidates by affordance")
    s.add_argument("--scene", required=True)
    s.add_argument("--mask")
    s.add_argument("--candidates", required=True)
    s.add_argument("--roi-depth", type=float, default=0.04)
    s.add_argument("--roi-height", type=float, default=0.02)
    s.add_argument("--approach-axis", type=_floats(3))
    s.add_argument("--max-angle", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank_grasps)

    s = sub.add_parser("pipeline", help="run a multi-stage manipulation config")
    s.add_argument("--config", required=True)
    s.add_argument("--output", help="override the config's output directory")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("export-pc", help="export Gaussian centres as PLY or a FEATF1 table")
    s.add_argument("--scene", required=True)
    s.add_argument("--mask")
    query_args(s, required=False)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_pc)

    s = sub.add_parser("grad-check", help="finite-difference check of the analytic gradients")
    s.add_argument("--scene")
    s.add_argument("--cameras")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--max-gaussians", type=int, default=8)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "grad-check" and args.scene and not args.cameras:
        print("featsplat grad-check: --scene needs --cameras", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"featsplat {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
