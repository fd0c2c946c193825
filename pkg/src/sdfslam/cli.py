"""Command-line entry points: run, mesh, eval-mesh, eval-ate, synth, check-grad."""

import argparse
import os
import sys

import numpy as np

from .config import default_config_yaml, load_config
from .dataio import load_trajectory
from .errors import ConfigError, DatasetError, MissingFile, NoAssociations, SlamError
from .evaluation import EvalReport, ate_rmse, cull_mesh, depth_l1, mesh_metrics
from .gradcheck import run_suite
from .mesh import load_ply, render_depth, save_ply
from .pipeline import extract_field_mesh, run_slam
from .scene_field import load_checkpoint
from .synthetic import generate_synthetic

# configuration and dataset problems exit 2, runtime failures exit 1
USAGE_ERRORS = (ConfigError, DatasetError, MissingFile, NoAssociations)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run_slam(cfg, progress=not args.quiet)
    print(f"processed {len(result.poses)} frames "
          f"({len(result.diverged)} diverged), outputs in {cfg.output_dir}")
    if result.gt_poses is not None and len(result.gt_poses) == len(result.poses):
        aligned = ate_rmse(result.poses, result.gt_poses, align=True)
        raw = ate_rmse(result.poses, result.gt_poses, align=False)
        print(f"ATE RMSE: {aligned:.4f} cm aligned, {raw:.4f} cm unaligned")
    return 0


def _cmd_mesh(args) -> int:
    params = load_checkpoint(args.checkpoint)
    mesh = extract_field_mesh(params, params.bounds, args.voxel)
    save_ply(args.out, mesh)
    print(f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles -> {args.out}")
    return 0


def _load_views(dataset_dir):
    from .dataio import read_intrinsics

    intr = read_intrinsics(os.path.join(dataset_dir, "intrinsics.txt"))
    _, poses = load_trajectory(os.path.join(dataset_dir, "trajectory.txt"))
    return intr, poses


def _cmd_eval_mesh(args) -> int:
    pred = load_ply(args.pred)
    gt = load_ply(args.gt)
    report = EvalReport()
    if args.cull:
        if not args.dataset:
            raise ConfigError("--cull needs --dataset for views")
        intr, poses = _load_views(args.dataset)
        renders = None
        if args.cull == "occlusion":
            # both meshes are culled against what the GT surface shows the
            # cameras, so they keep exactly the observed region
            renders = [render_depth(gt, intr, p) for p in poses]
        pred = cull_mesh(pred, poses, intr, gt_depth_renders=renders,
                         strategy=args.cull)
        gt = cull_mesh(gt, poses, intr, gt_depth_renders=renders,
                       strategy=args.cull)
    m = mesh_metrics(pred, gt, n_samples=args.samples,
                     threshold=args.threshold, seed=args.seed)
    report.accuracy, report.completion, report.completion_ratio = m
    if args.depth_views and args.dataset:
        intr, poses = _load_views(args.dataset)
        report.depth_l1 = depth_l1(pred, gt, intr, poses)
    print(f"accuracy {m.accuracy:.4f} cm")
    print(f"completion {m.completion:.4f} cm")
    print(f"completion_ratio {m.completion_ratio:.2f} %")
    if report.depth_l1 is not None:
        print(f"depth_l1 {report.depth_l1:.4f} cm")
    if args.out:
        report.save(args.out)
    return 0


def _cmd_eval_ate(args) -> int:
    _, pred = load_trajectory(args.pred)
    _, gt = load_trajectory(args.gt)
    value = ate_rmse(pred, gt, align=not args.no_align)
    print(f"{value:.6f}")
    return 0


def _cmd_synth(args) -> int:
    generate_synthetic(
        args.out_dir, n_frames=args.frames, width=args.width,
        height=args.height, noise_sigma=args.noise, seed=args.seed,
    )
    cfg_path = os.path.join(args.out_dir, "run.yaml")
    with open(cfg_path, "w") as fh:
        fh.write(default_config_yaml(args.out_dir,
                                     output_dir=args.out_dir.rstrip("/") + "_out",
                                     seed=args.seed))
    print(f"dataset in {args.out_dir}, ready config at {cfg_path}")
    return 0


def _cmd_check_grad(args) -> int:
    report, seconds = run_suite(max_per_array=args.per_array)
    status = "PASS" if report.ok(args.tol) else "FAIL"
    print(f"{status}: {report.n_checked} coordinates, "
          f"max relative error {report.max_rel_err:.3e} "
          f"(tolerance {args.tol:g}), {seconds:.2f}s")
    if report.worst is not None and not report.ok(args.tol):
        print(f"worst: {report.worst}")
    return 0 if report.ok(args.tol) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdfslam",
                                description="Neural RGB-D SLAM on the CPU")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("run", help="run SLAM from a YAML config")
    q.add_argument("config")
    q.add_argument("--quiet", action="store_true")
    q.set_defaults(fn=_cmd_run)

    q = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    q.add_argument("checkpoint")
    q.add_argument("out")
    q.add_argument("--voxel", type=float, default=0.02)
    q.set_defaults(fn=_cmd_mesh)

    q = sub.add_parser("eval-mesh", help="compare two meshes")
    q.add_argument("pred")
    q.add_argument("gt")
    q.add_argument("--cull", choices=("frustum", "occlusion"), default=None)
    q.add_argument("--dataset", help="dataset dir providing camera views")
    q.add_argument("--depth-views", action="store_true",
                   help="also report depth L1 over the dataset views")
    q.add_argument("--threshold", type=float, default=0.05)
    q.add_argument("--samples", type=int, default=200_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="write the report as JSON")
    q.set_defaults(fn=_cmd_eval_mesh)

    q = sub.add_parser("eval-ate", help="trajectory error between two files")
    q.add_argument("pred")
    q.add_argument("gt")
    q.add_argument("--no-align", action="store_true")
    q.set_defaults(fn=_cmd_eval_ate)

    q = sub.add_parser("synth", help="generate the synthetic dataset")
    q.add_argument("out_dir")
    q.add_argument("--frames", type=int, default=50)
    q.add_argument("--width", type=int, default=80)
    q.add_argument("--height", type=int, default=60)
    q.add_argument("--noise", type=float, default=0.005)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=_cmd_synth)

    q = sub.add_parser("check-grad", help="finite-difference gradient audit")
    q.add_argument("--tol", type=float, default=1e-4)
    q.add_argument("--per-array", type=int, default=6)
    q.set_defaults(fn=_cmd_check_grad)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SlamError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
