"""Keyframe pixel database and global bundle adjustment.

Keyframes never keep their full images: insertion copies a small uniform
subset of pixels (color, depth, camera-space direction) into flat arrays.
Bundle adjustment repeatedly draws rays from the whole database, rebuilds
them from the keyframes' current poses, steps the scene parameters every
iteration, and applies one accumulated pose step per k_m scene steps.
The first keyframe's pose is pinned to fix the gauge.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import Frame
from .encoding import smoothness_backward, smoothness_sample
from .errors import DuplicateKeyframe, EmptyDatabase
from .geometry import Intrinsics, Pose, exp_map
from .objectives import LossWeights, ray_losses
from .optim import AdamGroup, PoseAdam
from .renderer import RayBatch, SamplingConfig, render, render_backward
from .scene_field import SceneGrads, SceneParams, field_functions

SMOOTH_REGION = 4  # grid vertices per axis in each smoothness probe


@dataclass(frozen=True)
class MappingConfig:
    n_g: int = 2048
    ba_iters: int = 10
    k_m: int = 10
    first_frame_iters: int = 200
    map_every: int = 5

    def __post_init__(self):
        if min(self.n_g, self.ba_iters, self.k_m, self.first_frame_iters, self.map_every) < 1:
            raise ValueError("mapping configuration values must all be >= 1")


class KeyframeDB:
    """Column-packed pixel records plus one optimizable pose per keyframe."""

    def __init__(self, intr: Intrinsics, pixel_fraction: float = 0.05, keyframe_every: int = 5):
        if not 0 < pixel_fraction <= 1:
            raise ValueError("pixel_fraction must be in (0, 1]")
        self.intr = intr
        self.pixel_fraction = pixel_fraction
        self.keyframe_every = keyframe_every
        self.frame_ids: list[int] = []  # insertion order; slot 0 fixes the gauge
        self.poses: list[Pose] = []
        self.uv = np.zeros((0, 2), dtype=np.int32)
        self.d_cam = np.zeros((0, 3))  # unit camera-frame directions
        self.color = np.zeros((0, 3))
        self.depth = np.zeros(0)
        self.rec_slot = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.uv)

    @property
    def n_keyframes(self) -> int:
        return len(self.frame_ids)

    def slot_of(self, frame_id: int) -> int:
        return self.frame_ids.index(frame_id)

    def insert_keyframe(self, frame: Frame, pose: Pose, rng) -> int:
        """Sample pixel_fraction of the frame's pixels into the database."""
        if frame.index in self.frame_ids:
            raise DuplicateKeyframe(f"frame {frame.index} already inserted")
        w, h = self.intr.width, self.intr.height
        n = int(round(self.pixel_fraction * w * h))
        flat = rng.choice(w * h, size=n, replace=False)
        u, v = flat % w, flat // w
        d_cam = np.stack(
            [(u - self.intr.cx) / self.intr.fx, (v - self.intr.cy) / self.intr.fy, np.ones(n)],
            axis=1,
        )
        norms = np.linalg.norm(d_cam, axis=1)
        d_cam /= norms[:, None]

        slot = self.n_keyframes
        self.frame_ids.append(frame.index)
        self.poses.append(pose)
        self.uv = np.concatenate([self.uv, np.stack([u, v], 1).astype(np.int32)])
        self.d_cam = np.concatenate([self.d_cam, d_cam])
        self.color = np.concatenate([self.color, frame.color[v, u]])
        # sensor z-depth -> distance along the stored unit direction
        self.depth = np.concatenate([self.depth, frame.depth[v, u] * norms])
        self.rec_slot = np.concatenate([self.rec_slot, np.full(n, slot, dtype=np.int64)])
        return slot

    def draw_indices(self, n_g: int, rng, slots=None) -> np.ndarray:
        """Uniform record draw: without replacement when the pool is large
        enough, with replacement otherwise.  `slots` restricts the pool."""
        if len(self) == 0:
            raise EmptyDatabase("no keyframes inserted")
        pool = np.arange(len(self))
        if slots is not None:
            pool = pool[np.isin(self.rec_slot, np.asarray(list(slots)))]
            if len(pool) == 0:
                raise EmptyDatabase("no records in the requested keyframe window")
        return rng.choice(pool, size=n_g, replace=len(pool) < n_g)

    def materialize(self, idx: np.ndarray) -> RayBatch:
        """Build world rays for records idx under the CURRENT keyframe poses."""
        slots = self.rec_slot[idx]
        rot = np.stack([p.rotation for p in self.poses])
        trans = np.stack([p.translation for p in self.poses])
        dirs = np.einsum("nij,nj->ni", rot[slots], self.d_cam[idx])
        return RayBatch(
            origins=trans[slots],
            dirs=dirs,
            gt_color=self.color[idx],
            gt_depth=self.depth[idx],
            pose_ids=slots,
        )

    def sample_global_rays(self, n_g: int, rng, slots=None) -> RayBatch:
        return self.materialize(self.draw_indices(n_g, rng, slots=slots))

    def dump(self, path: str) -> None:
        header = {
            "pixel_fraction": self.pixel_fraction,
            "keyframe_every": self.keyframe_every,
            "frame_ids": self.frame_ids,
            "intrinsics": [
                self.intr.fx, self.intr.fy, self.intr.cx, self.intr.cy,
                self.intr.width, self.intr.height, self.intr.depth_scale,
            ],
        }
        np.savez(
            path,
            header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            uv=self.uv, d_cam=self.d_cam, color=self.color, depth=self.depth,
            rec_slot=self.rec_slot,
            poses=np.stack([p.matrix for p in self.poses]),
        )

    @staticmethod
    def restore(path: str) -> "KeyframeDB":
        data = np.load(path)
        header = json.loads(bytes(data["header"]).decode())
        i = header["intrinsics"]
        intr = Intrinsics(
            fx=i[0], fy=i[1], cx=i[2], cy=i[3],
            width=int(i[4]), height=int(i[5]), depth_scale=i[6],
        )
        db = KeyframeDB(intr, header["pixel_fraction"], header["keyframe_every"])
        db.frame_ids = [int(f) for f in header["frame_ids"]]
        db.poses = [Pose(m.copy()) for m in data["poses"]]
        db.uv = data["uv"]
        db.d_cam = data["d_cam"]
        db.color = data["color"]
        db.depth = data["depth"]
        db.rec_slot = data["rec_slot"]
        return db


@dataclass
class BaCounters:
    scene_steps: int = 0
    pose_steps: int = 0


def make_optim_groups(params: SceneParams, lr_grid: float = 1e-2, lr_decoder: float = 1e-2):
    """Adam groups matching the SceneGrads array layout."""
    grid = AdamGroup.create("grid", params.grid.features, lr_grid)
    decoder = AdamGroup.create(
        "decoder",
        params.geo.weights + params.geo.biases + params.color.weights + params.color.biases,
        lr_decoder,
    )
    return [grid, decoder]


def global_ba(
    db: KeyframeDB,
    params: SceneParams,
    groups: list[AdamGroup],
    pose_optims: dict[int, PoseAdam],
    cfg: MappingConfig,
    sampling: SamplingConfig,
    weights: LossWeights,
    rng,
    bounds=None,
    iters: int | None = None,
    pose_optim: bool = True,
    pose_lr: float = 1e-3,
    window: int | None = None,
):
    """Joint scene/pose optimization over the sampled-pixel database.

    Scene parameters step every iteration; pose gradients accumulate and
    apply once per k_m iterations (and at round end), averaged over the
    accumulation span.  Slot 0 never moves.  `window` restricts both ray
    sampling and pose updates to the most recent keyframes.  Optimizer
    state lives in `groups` / `pose_optims` so momentum carries across
    rounds.
    """
    if len(db) == 0:
        raise EmptyDatabase("bundle adjustment requires at least one keyframe")
    n_iters = cfg.ba_iters if iters is None else iters
    ev, bw = field_functions(params)
    scene_bounds = bounds if bounds is not None else params.bounds

    slots = None
    if window is not None:
        slots = list(range(max(0, db.n_keyframes - window), db.n_keyframes))

    reports = []
    counters = BaCounters()
    accum = np.zeros((db.n_keyframes, 6))
    accum_n = 0

    def apply_pose_step():
        nonlocal accum, accum_n
        if accum_n == 0:
            return
        movable = range(1, db.n_keyframes) if slots is None else [s for s in slots if s != 0]
        for s in movable:
            opt = pose_optims.setdefault(s, PoseAdam(pose_lr))
            delta = opt.step(accum[s] / accum_n)
            db.poses[s] = Pose(exp_map(delta) @ db.poses[s].matrix)
        counters.pose_steps += 1
        accum = np.zeros((db.n_keyframes, 6))
        accum_n = 0

    for _ in range(n_iters):
        rays = db.sample_global_rays(cfg.n_g, rng, slots=slots)
        batch = render(rays, ev, sampling, rng, bounds=scene_bounds)
        smooth_val, smooth_tape = smoothness_sample(
            params.grid, scene_bounds, SMOOTH_REGION, rng
        )
        report, rg = ray_losses(batch, weights, smooth=smooth_val)
        reports.append(report)

        grads = SceneGrads.zeros(params)
        pose_grad = render_backward(
            batch, bw, rg.chat, rg.dhat, rg.sdf, grads, need_pose_grad=pose_optim
        )
        smoothness_backward(params.grid, smooth_tape, grads.grid, weights.smooth)

        grad_list = grads.arrays()
        groups[0].step(grad_list[: len(groups[0].params)])
        groups[1].step(grad_list[len(groups[0].params):])
        counters.scene_steps += 1

        if pose_optim:
            accum[: pose_grad.shape[0]] += pose_grad
            accum_n += 1
            if accum_n >= cfg.k_m:
                apply_pose_step()

    if pose_optim:
        apply_pose_step()
    return reports, counters
