"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ContractError
from .eval import SampledSurface, compute_metrics, nearest, sample_mesh
from .fileio import (RunConfig, load_checkpoint, load_mesh, load_point_cloud, load_run_config,
                     save_checkpoint, save_mesh, save_point_cloud)
from .geometry import PointCloud, Shape, add_noise, normalize_to_unit_cube, random_shape, sample_surface
from .pipeline import plot_trace, pretrain, reconstruct, write_trace
from .scene import default_margin, plan_windows, reconstruct_scene

log = logging.getLogger("saocc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="saocc", description="Sign-agnostic occupancy reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-shapes", help="write random CSG shapes and noisy input clouds")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--points", type=int, default=30000)
    g.add_argument("--noise", type=float, default=0.05)

    t = sub.add_parser("pretrain", help="supervised pretraining on a shape directory")
    t.add_argument("--shapes", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--trace")

    r = sub.add_parser("reconstruct", help="reconstruct a mesh from one point cloud")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--mode", choices=["feedforward", "full", "encoder-only"], default="full")
    r.add_argument("--sa-iters", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--trace")

    s = sub.add_parser("scene", help="sliding-window reconstruction of a large cloud")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--core", type=int, required=True)
    s.add_argument("--margin", type=int)
    s.add_argument("--global-res", type=int, default=64)
    s.add_argument("--mode", choices=["feedforward", "full", "encoder-only"], default="feedforward")
    s.add_argument("--sa-iters", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--plan")
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="compare a mesh with a ground-truth shape")
    e.add_argument("--mesh", required=True)
    e.add_argument("--gt-shape", required=True)
    e.add_argument("--tau", type=float, default=0.01)
    e.add_argument("--points", type=int, default=10000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True)
    return p


def _run_config(path):
    return load_run_config(path) if path else RunConfig().validate()


def _sa_config(cfg, mode, iters, seed):
    if mode == "feedforward":
        return None
    sa = replace(cfg.sa, mode="encoder_only" if mode == "encoder-only" else "full", seed=seed)
    if iters is not None:
        sa.iterations = iters
    return sa.validate()


def cmd_gen_shapes(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count * 3)
    for i in range(args.count):
        shape = random_shape(int(seeds[3 * i]))
        (out / f"shape_{i:04d}.json").write_text(shape.to_json())
        clean = sample_surface(shape, args.points, seed=int(seeds[3 * i + 1]))
        save_point_cloud(add_noise(clean, args.noise, seed=int(seeds[3 * i + 2])),
                         out / f"shape_{i:04d}.ply")
    print(f"wrote {args.count} shapes to {out}")


def cmd_pretrain(args):
    cfg = _run_config(args.config)
    files = sorted(Path(args.shapes).glob("*.json"))
    if not files:
        raise ContractError(f"no shape files (*.json) in {args.shapes}")
    shapes = [Shape.from_json(f.read_text()) for f in files]
    result = pretrain(shapes, cfg.pretrain, cfg.net,
                      progress=lambda i, l: log.info("iteration %d loss %.5f", i, l))
    save_checkpoint(result.model, args.out)
    if args.trace:
        _write_trace(result.trace, args.trace, "pretraining BCE")
    print(f"pretrained on {len(shapes)} shapes in {result.seconds:.1f}s -> {args.out}")


def _write_trace(rows, path, title):
    write_trace(rows, path)
    plot_trace(rows, str(Path(path).with_suffix(".png")), title)


def cmd_reconstruct(args):
    cfg = _run_config(args.config)
    model = load_checkpoint(args.ckpt)
    pc = load_point_cloud(args.input)
    sa = _sa_config(cfg, args.mode, args.sa_iters, args.seed)
    rows = []
    mesh = reconstruct(model, pc, sa, cfg.mise, trace=rows)
    save_mesh(mesh, args.out)
    if args.trace:
        _write_trace(rows, args.trace, f"sign-agnostic optimization ({args.mode})")
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")


def cmd_scene(args):
    cfg = _run_config(args.config)
    model = load_checkpoint(args.ckpt)
    pc = load_point_cloud(args.input)
    R = model.config.grid_res
    # the network keeps its training voxel size; the scene spans global_res such voxels
    cloud, tr = normalize_to_unit_cube(pc)
    extent = args.global_res / R
    cloud = PointCloud(cloud.points * extent)
    margin = default_margin(model.config) if args.margin is None else args.margin
    plan = plan_windows(args.global_res, args.core, margin, voxel_size=1.0 / R)
    if args.plan:
        Path(args.plan).write_text(plan.dump())
    sa = _sa_config(cfg, args.mode, args.sa_iters, args.seed)
    mesh = reconstruct_scene(model, cloud, plan, sa, seed=args.seed)
    mesh = type(mesh)(tr.to_world(mesh.vertices / extent), mesh.faces)
    save_mesh(mesh, args.out)
    print(f"{len(plan.windows)} windows, {len(mesh.faces)} faces -> {args.out}")


def _plot_distances(d_pred, d_gt, tau, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    top = max(np.quantile(d_pred, 0.99), np.quantile(d_gt, 0.99), 3 * tau)
    bins = np.linspace(0, top, 60)
    ax.hist(d_pred, bins=bins, alpha=0.6, label="reconstruction to truth")
    ax.hist(d_gt, bins=bins, alpha=0.6, label="truth to reconstruction")
    for t, ls in ((tau, "--"), (2 * tau, ":")):
        ax.axvline(t, color="k", ls=ls, lw=0.8)
    ax.set_xlabel("nearest-neighbour distance")
    ax.set_ylabel("samples")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args):
    mesh = load_mesh(args.mesh)
    shape = Shape.from_json(Path(args.gt_shape).read_text())
    gt_pc = sample_surface(shape, args.points, seed=args.seed)
    gt = SampledSurface(gt_pc.points, gt_pc.normals)
    pred = sample_mesh(mesh, args.points, seed=args.seed + 1)
    report = compute_metrics(pred, gt, args.tau)
    Path(args.report).write_text(report.to_json() + "\n")
    _plot_distances(nearest(pred.points, gt.points)[0], nearest(gt.points, pred.points)[0],
                    args.tau, str(Path(args.report).with_suffix(".png")))
    print(report.to_json())


COMMANDS = {"gen-shapes": cmd_gen_shapes, "pretrain": cmd_pretrain,
            "reconstruct": cmd_reconstruct, "scene": cmd_scene, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"saocc {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
