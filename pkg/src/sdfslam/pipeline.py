"""End-to-end loop: initialize on frame 0, then track every frame and
periodically insert keyframes and run global bundle adjustment."""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import RunConfig
from .dataio import load_synthetic, load_tum, save_trajectory
from .encoding import SceneBounds
from .errors import ConfigError, EmptySurface
from .geometry import Intrinsics, Pose
from .mapping import KeyframeDB, global_ba, make_optim_groups
from .mesh import extract_mesh, save_ply
from .scene_field import (
    field_forward,
    field_functions,
    init_scene_params,
    save_checkpoint,
)
from .synthetic import read_bounds
from .tracking import motion_model_init, track_frame


@dataclass
class SlamResult:
    poses: list                    # one estimate per processed frame, file order
    timestamps: list
    params: object                 # trained SceneParams
    db: KeyframeDB
    diverged: list = field(default_factory=list)  # frame indices that reverted
    gt_poses: Optional[list] = None
    mesh_path: Optional[str] = None


def load_dataset(cfg: RunConfig):
    """(intrinsics, frames, gt_poses or None) with the frame range applied."""
    if cfg.dataset_format == "tum":
        intr, frames, gt = load_tum(cfg.dataset)
    else:
        intr, frames, gt = load_synthetic(cfg.dataset)
    sl = slice(cfg.frame_start, cfg.frame_end)
    frames = frames[sl]
    gt = gt[sl] if gt is not None else None
    if not frames:
        raise ConfigError("frame range selects no frames")
    return intr, frames, gt


def resolve_bounds(cfg: RunConfig) -> SceneBounds:
    if cfg.bounds is not None:
        return cfg.bounds
    path = os.path.join(cfg.dataset, "bounds.txt")
    if not os.path.isfile(path):
        raise ConfigError("config has no bounds and the dataset has no bounds.txt")
    return read_bounds(path)


def _report_lines(phase: str, frame_idx: int, reports) -> str:
    out = []
    for i, rep in enumerate(reports):
        rec = {"phase": phase, "frame": frame_idx, "iter": i}
        rec.update(rep.__dict__)
        out.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in out)


def run_slam(cfg: RunConfig, progress: bool = False) -> SlamResult:
    """Run the full system and write trajectory, checkpoint, metrics, and mesh.

    Frame 0 is pinned to the identity and mapped for first_frame_iters; every
    later frame is tracked from a constant-velocity guess, and every
    map_every-th frame becomes a keyframe followed by a bundle-adjustment
    round. Tracking divergence reverts that frame's pose and the run goes on.
    All randomness flows from one seeded generator.
    """
    intr, frames, gt_poses = load_dataset(cfg)
    bounds = resolve_bounds(cfg)
    rng = np.random.default_rng(cfg.seed)

    params = init_scene_params(
        cfg.grid, cfg.oneblob, bounds,
        cfg.field_cfg.hidden, cfg.field_cfg.h_dim,
        cfg.sampling.truncation, rng,
    )
    groups = make_optim_groups(params, cfg.ba.lr_grid, cfg.ba.lr_decoder)
    pose_optims: dict = {}
    db = KeyframeDB(intr, pixel_fraction=cfg.ba.pixel_fraction,
                    keyframe_every=cfg.mapping.map_every)
    ev, bw = field_functions(params)

    os.makedirs(cfg.output_dir, exist_ok=True)
    metrics = open(os.path.join(cfg.output_dir, "metrics.jsonl"), "w")

    est_poses: list = []
    diverged: list = []
    kf_slots: dict = {}  # position in the processed sequence -> db slot

    try:
        for t, frame in enumerate(frames):
            if t == 0:
                pose = Pose.identity()
                est_poses.append(pose)
                kf_slots[0] = db.insert_keyframe(frame, pose, rng)
                reports, _ = global_ba(
                    db, params, groups, pose_optims, cfg.mapping,
                    cfg.sampling, cfg.weights, rng, bounds=bounds,
                    iters=cfg.mapping.first_frame_iters, pose_optim=False,
                )
                metrics.write(_report_lines("init", frame.index, reports))
                if progress:
                    print(f"frame {frame.index}: init, loss {reports[-1].total:.4f}")
                continue

            init = (est_poses[-1] if t == 1
                    else motion_model_init(est_poses[-1], est_poses[-2]))
            result = track_frame(
                ev, bw, frame, intr, init, cfg.tracking,
                cfg.sampling, cfg.weights, rng, bounds=bounds,
            )
            est_poses.append(result.pose)
            metrics.write(_report_lines("track", frame.index, result.reports))
            if result.diverged:
                diverged.append(frame.index)
                if progress:
                    print(f"frame {frame.index}: tracking diverged, pose reverted")

            if t % cfg.mapping.map_every == 0:
                kf_slots[t] = db.insert_keyframe(frame, result.pose, rng)
                reports, _ = global_ba(
                    db, params, groups, pose_optims, cfg.mapping,
                    cfg.sampling, cfg.weights, rng, bounds=bounds,
                    pose_optim=cfg.ba.pose_optim, pose_lr=cfg.ba.lr_pose,
                    window=cfg.ba.window,
                )
                metrics.write(_report_lines("ba", frame.index, reports))
                # refined keyframe poses feed the trajectory and motion model
                for pos, slot in kf_slots.items():
                    est_poses[pos] = db.poses[slot]
            if progress:
                print(f"frame {frame.index}: tracked, "
                      f"loss {result.loss_final:.4f}")
    finally:
        metrics.close()

    timestamps = [f.timestamp for f in frames]
    save_trajectory(os.path.join(cfg.output_dir, "trajectory.txt"),
                    timestamps, est_poses)
    save_checkpoint(params, os.path.join(cfg.output_dir, "checkpoint.npz"))
    db.dump(os.path.join(cfg.output_dir, "keyframes.npz"))

    # a run too short to form a surface should still return its trajectory
    mesh_path = os.path.join(cfg.output_dir, "mesh.ply")
    try:
        mesh = extract_field_mesh(params, bounds, cfg.mesh_voxel)
        save_ply(mesh_path, mesh)
    except EmptySurface:
        mesh_path = None

    return SlamResult(
        poses=est_poses, timestamps=timestamps, params=params, db=db,
        diverged=diverged, gt_poses=gt_poses, mesh_path=mesh_path,
    )


def extract_field_mesh(params, bounds: SceneBounds, voxel: float):
    """Zero level set of the learned SDF with colors from the color head."""

    def sdf_fn(pts):
        return field_forward(params, pts)[0].sdf

    def color_fn(pts):
        return field_forward(params, pts)[0].color

    return extract_mesh(sdf_fn, bounds, voxel, color_fn=color_fn)
