"""Command-line entry point: ``flowrecon <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys

import numpy as np

from .. import viewplan
from ..flowcore import FlowBatch
from ..gsopt import write_training_log
from ..scenecore.io import load_scene, read_camera_list, save_scene, write_camera_list, write_ppm
from ..velocitynet import VelocityNet, VelocityNetConfig, load_model, save_model, train_toy
from . import config as cfgmod
from .plotting import plot_csv
from .recon import (
    DepthCues,
    IdentityFlow,
    ModelFlow,
    OracleFlow,
    equally_spaced,
    evaluate,
    generate_pairs,
    initial_reconstruction,
    pairs_to_flow_batches,
    refine_reconstruction,
    write_metrics_csv,
)
from .synthetic import generate_synthetic_scene

logger = logging.getLogger("flowrecon")


def git_describe():
    try:
        here = os.path.dirname(os.path.abspath(__file__))
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True, text=True,
                             timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir, command, cfg, **extra):
    data = {"command": command, "seed": cfg.scene.seed, "git": git_describe(), "config": cfgmod.as_dict(cfg)}
    data.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)


def save_cues(path, cues):
    arrays = {}
    for vid in cues.mono:
        arrays[f"mono_{vid}"] = cues.mono[vid]
        arrays[f"conf_{vid}"] = cues.confidence[vid]
        arrays[f"sparse_{vid}"] = cues.sparse[vid]
    np.savez(path, **arrays)


def load_cues(path):
    mono, conf, sparse = {}, {}, {}
    with np.load(path) as z:
        for key in z.files:
            kind, vid = key.split("_", 1)
            {"mono": mono, "conf": conf, "sparse": sparse}[kind][int(vid)] = z[key]
    return DepthCues(mono, conf, sparse)


def save_views(out_dir, name, views, subdir="images"):
    os.makedirs(os.path.join(out_dir, subdir), exist_ok=True)
    paths = []
    for v in views:
        rel = os.path.join(subdir, f"view_{v.id:04d}.ppm")
        write_ppm(os.path.join(out_dir, rel), v.image)
        paths.append(rel)
    write_camera_list(os.path.join(out_dir, name), views, paths)


def _synthetic(cfg, seed=None):
    s = cfg.scene
    return generate_synthetic_scene(seed if seed is not None else s.seed, s.n_primitives, s.trajectory, s.n_views,
                                    s.image_size, s.depth_noise, s.metric_scale,
                                    scale_range=(s.scale_min, s.scale_max))


def _split(views, cfg):
    inputs = equally_spaced(views, cfg.scene.n_inputs)
    ids = {v.id for v in inputs}
    return inputs, [v for v in views if v.id not in ids]


def cmd_gen_scene(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    synth = _synthetic(cfg)
    save_scene(synth.gt, os.path.join(args.out, "gt.flwr"))
    save_views(args.out, "cameras.txt", synth.views)
    save_cues(os.path.join(args.out, "depths.npz"), DepthCues.from_synthetic(synth))
    write_manifest(args.out, "gen-scene", cfg, n_views=len(synth.views))


def cmd_reconstruct(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    views = read_camera_list(os.path.join(args.scene, "cameras.txt"))
    cues = load_cues(os.path.join(args.scene, "depths.npz"))
    inputs, held = _split(views, cfg)
    history = []
    scene = initial_reconstruction(inputs, cues, cfg.recon, history=history)
    save_scene(scene, os.path.join(args.out, "recon.flwr"))
    write_camera_list(os.path.join(args.out, "inputs.txt"), inputs,
                      [os.path.join(os.path.abspath(args.scene), "images", f"view_{v.id:04d}.ppm") for v in inputs])
    write_camera_list(os.path.join(args.out, "heldout.txt"), held,
                      [os.path.join(os.path.abspath(args.scene), "images", f"view_{v.id:04d}.ppm") for v in held])
    write_training_log(os.path.join(args.out, "training_log.csv"), history)
    write_manifest(args.out, "reconstruct", cfg, n_inputs=len(inputs), primitives=len(scene))


def cmd_plan_views(args, cfg):
    scene = load_scene(os.path.join(args.recon, "recon.flwr"))
    inputs = read_camera_list(os.path.join(args.recon, "inputs.txt"))
    pts = np.asarray(scene.positions, dtype=np.float64)[scene.opacities > 0.1]
    targets = viewplan.plan_targets(inputs, pts, cfg.plan)
    viewplan.write_plan(args.out, targets)
    print(f"{len(targets)} target poses kept, {len(targets.rejected)} rejected")


def cmd_gen_pairs(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    fc = cfg.flow
    items = []
    for k in range(fc.train_scenes):
        synth = _synthetic(cfg, seed=cfg.scene.seed + 1000 + k)
        records = generate_pairs(synth.views, DepthCues.from_synthetic(synth), fc.levels(), cfg.recon)
        items += pairs_to_flow_batches(records, synth.views, fc.n_targets, fc.n_sources, fc.factor, seed=fc.seed + k)
    if not items:
        raise RuntimeError("no training pairs were produced")
    np.savez(
        os.path.join(args.out, "pairs.npz"),
        z0=np.concatenate([b.z0 for b in items]),
        z1=np.concatenate([b.z1 for b in items]),
        src=np.concatenate([b.cond["src"] for b in items]),
        raymaps=np.concatenate([b.cond["raymaps"] for b in items]),
        indices=np.concatenate([b.cond["indices"] for b in items]),
    )
    write_manifest(args.out, "gen-pairs", cfg, n_items=len(items))


def load_flow_batches(path):
    with np.load(path) as z:
        n = len(z["z0"])
        return [
            FlowBatch(z["z0"][i : i + 1], z["z1"][i : i + 1],
                      {"src": z["src"][i : i + 1], "raymaps": z["raymaps"][i : i + 1], "indices": z["indices"][i : i + 1]})
            for i in range(n)
        ]


def flow_model_config(cfg):
    fc = cfg.flow
    return VelocityNetConfig(dim=fc.dim, depth=fc.depth, heads=fc.heads, mlp_ratio=fc.mlp_ratio, seed=fc.seed,
                             cond_channels=3 if fc.source == "gaussian" else 0)


def cmd_train_flow(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    fc = cfg.flow
    data = load_flow_batches(os.path.join(args.pairs, "pairs.npz"))
    model = VelocityNet(flow_model_config(cfg))
    model, history = train_toy(model, data, fc.steps, fc.lr, fc.batch_size, fc.seed, source=fc.source)
    save_model(model, os.path.join(args.out, "model.bin"))
    with open(os.path.join(args.out, "flow_log.csv"), "w") as f:
        f.write("step,loss\n")
        for row in history:
            f.write(f"{row['step']},{row['loss']!r}\n")
    write_manifest(args.out, "train-flow", cfg, n_items=len(data))


def cmd_refine(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    g_src = load_scene(os.path.join(args.recon, "recon.flwr"))
    inputs = read_camera_list(os.path.join(args.recon, "inputs.txt"))
    cues = load_cues(os.path.join(args.scene, "depths.npz"))
    if args.model:
        fc = cfg.flow
        flow = ModelFlow(load_model(args.model), fc.n_targets, fc.n_sources, fc.factor, fc.n_steps, fc.schedule,
                         fc.seed)
    elif args.flow == "oracle":
        flow = OracleFlow(load_scene(os.path.join(args.scene, "gt.flwr")))
    else:
        flow = IdentityFlow()
    history = []
    res = refine_reconstruction(g_src, inputs, flow, cues, cfg.recon, cfg.plan, history=history)
    save_scene(res.scene, os.path.join(args.out, "refined.flwr"))
    targets = viewplan.TargetPoseSet(list(res.targets), list(res.tags))
    viewplan.write_plan(os.path.join(args.out, "targets.txt"), targets)
    write_training_log(os.path.join(args.out, "training_log.csv"), history)
    write_manifest(args.out, "refine", cfg, n_targets=len(res.targets), flow=args.model or args.flow)


def cmd_eval(args, cfg):
    scene = load_scene(args.scene_file)
    views = read_camera_list(args.cameras)
    thr = args.threshold if args.threshold is not None else cfg.eval.opacity_threshold
    report = evaluate(scene, views, thr)
    write_metrics_csv(args.out, report)
    print(f"mean PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}, coverage {report.coverage:.3f}")


def cmd_plot(args, cfg):
    plot_csv(args.csv, args.out, x=args.x, y=args.y or None, title=args.title, logy=args.logy)


def cmd_print_config(args, cfg):
    sys.stdout.write(cfgmod.dump_config(cfg))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flowrecon", description="Sparse-view Gaussian reconstruction with flow refinement")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="write a synthetic scene with images and depth cues")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_scene)

    s = sub.add_parser("reconstruct", parents=[common], help="initial reconstruction from the input split")
    s.add_argument("--scene", required=True, help="directory written by gen-scene")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("plan-views", parents=[common], help="plan target poses around a reconstruction")
    s.add_argument("--recon", required=True)
    s.add_argument("--out", required=True, help="plan file")
    s.set_defaults(fn=cmd_plan_views)

    s = sub.add_parser("gen-pairs", parents=[common], help="build (rendering, ground truth) flow training pairs")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_pairs)

    s = sub.add_parser("train-flow", parents=[common], help="train the velocity network on pairs")
    s.add_argument("--pairs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_flow)

    s = sub.add_parser("refine", parents=[common], help="refine a reconstruction with generated views")
    s.add_argument("--scene", required=True)
    s.add_argument("--recon", required=True)
    s.add_argument("--model", help="velocity-net checkpoint")
    s.add_argument("--flow", choices=["identity", "oracle"], default="identity",
                   help="built-in flow when no model is given")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_refine)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/coverage CSV for a scene and cameras")
    s.add_argument("--scene-file", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("plot", parents=[common], help="SVG line plot of CSV columns")
    s.add_argument("--csv", nargs="+", required=True)
    s.add_argument("--x")
    s.add_argument("--y", nargs="*")
    s.add_argument("--title")
    s.add_argument("--logy", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_plot)

    s = sub.add_parser("print-config", parents=[common], help="print the effective configuration")
    s.set_defaults(fn=cmd_print_config)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.set)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        args.fn(args, cfg)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
