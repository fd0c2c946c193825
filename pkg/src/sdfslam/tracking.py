"""Per-frame camera tracking against a frozen scene field.

Each iteration redraws a fresh set of pixels, renders them under the
current pose estimate, and takes one Adam step on the left-multiplied
twist.  The field itself receives no gradient here.  A frame whose final
loss exceeds twice its initial loss (or whose rays all turn degenerate)
reverts to the initialization and is flagged.
"""

from dataclasses import dataclass

import numpy as np

from .dataio import Frame, frame_rays
from .errors import EmptyBatch
from .geometry import Intrinsics, Pose, exp_map
from .objectives import LossWeights, ray_losses
from .optim import PoseAdam
from .renderer import SamplingConfig, render, render_backward

DIVERGENCE_FACTOR = 2.0


@dataclass(frozen=True)
class TrackingConfig:
    n_pixels: int = 1024
    iters: int = 10
    lr: float = 1e-3

    def __post_init__(self):
        if self.n_pixels < 1 or self.iters < 0 or self.lr <= 0:
            raise ValueError("bad tracking configuration")


@dataclass
class TrackingResult:
    pose: Pose
    diverged: bool
    loss_initial: float
    loss_final: float
    reports: list


def motion_model_init(prev: Pose, prev_prev: Pose) -> Pose:
    """Constant-velocity pose guess: apply the last inter-frame delta again."""
    return prev.compose(prev_prev.inverse()).compose(prev)


def sample_pixels(intr: Intrinsics, n: int, rng) -> np.ndarray:
    """(n, 2) integer (u, v) pixel draws, uniform over the image."""
    return rng.integers(0, [intr.width, intr.height], size=(n, 2))


def track_frame(
    field_eval,
    field_grad,
    frame: Frame,
    intr: Intrinsics,
    init_pose: Pose,
    cfg: TrackingConfig,
    sampling: SamplingConfig,
    weights: LossWeights,
    rng,
    bounds=None,
) -> TrackingResult:
    if cfg.iters == 0:
        return TrackingResult(
            pose=init_pose, diverged=False,
            loss_initial=float("nan"), loss_final=float("nan"), reports=[],
        )

    pose = init_pose
    optimizer = PoseAdam(cfg.lr)
    reports = []
    diverged = False

    def evaluate(at_pose):
        rays = frame_rays(frame, intr, at_pose, sample_pixels(intr, cfg.n_pixels, rng))
        batch = render(rays, field_eval, sampling, rng, bounds=bounds)
        return batch, ray_losses(batch, weights)

    for _ in range(cfg.iters):
        try:
            batch, (report, rg) = evaluate(pose)
        except EmptyBatch:
            diverged = True
            break
        reports.append(report)
        grad = render_backward(
            batch, field_grad, rg.chat, rg.dhat, rg.sdf, None, need_pose_grad=True
        )
        pose = Pose(exp_map(optimizer.step(grad)) @ pose.matrix)

    loss_initial = reports[0].total if reports else float("nan")
    loss_final = float("nan")
    if not diverged:
        try:
            _, (final_report, _) = evaluate(pose)
            loss_final = final_report.total
            diverged = loss_final > DIVERGENCE_FACTOR * loss_initial
        except EmptyBatch:
            diverged = True

    if diverged:
        pose = init_pose
    return TrackingResult(
        pose=pose, diverged=diverged,
        loss_initial=loss_initial, loss_final=loss_final, reports=reports,
    )
