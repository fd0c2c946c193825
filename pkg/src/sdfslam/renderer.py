"""SDF-weighted volume rendering along camera rays.

Per-ray sample depths combine stratified coverage of [near, far] with a
uniform band around the sensor depth when one is available.  Each sample's
weight is sigmoid(s/tr) * sigmoid(-s/tr), which peaks at the zero crossing
of the signed distance field; color and depth are weight-averaged over the
ray.  The backward pass chains loss gradients through the normalization,
the weight bell, the field, and optionally out to a left-multiplied twist
on the camera pose.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateRay, EmptyBatch
from .encoding import SceneBounds

# below this total weight a ray carries no surface evidence
WEIGHT_FLOOR = 1e-10


@dataclass(frozen=True)
class SamplingConfig:
    m_c: int = 32
    m_f: int = 11
    near: float = 0.1
    far: float = 4.0
    d_s: float = 0.025
    truncation: float = 0.1

    def __post_init__(self):
        if self.m_c < 1 or self.m_f < 0:
            raise ValueError("need m_c >= 1 and m_f >= 0")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.d_s <= 0 or self.truncation <= 0:
            raise ValueError("d_s and truncation must be positive")

    @property
    def samples_per_ray(self) -> int:
        return self.m_c + self.m_f


@dataclass
class RayBatch:
    """Column-packed rays: origins/dirs (n,3), gt_color (n,3), gt_depth (n,).

    gt_depth uses NaN for pixels without a sensor reading.  pose_ids, when
    given, assigns each ray to a pose slot for gradient accumulation.
    """

    origins: np.ndarray
    dirs: np.ndarray
    gt_color: np.ndarray
    gt_depth: np.ndarray
    pose_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class RenderBatch:
    rays: RayBatch
    cfg: SamplingConfig
    t: np.ndarray  # (n, S) sorted sample depths
    positions: np.ndarray  # (n, S, 3)
    sdf: np.ndarray  # (n, S)
    colors: np.ndarray  # (n, S, 3)
    sig: np.ndarray  # (n, S) sigmoid(s / tr), reused by backward
    weights: np.ndarray  # (n, S), zero at padded slots
    wsum: np.ndarray  # (n,)
    chat: np.ndarray  # (n, 3)
    dhat: np.ndarray  # (n,)
    valid_samples: np.ndarray  # (n, S) bool
    valid_ray: np.ndarray  # (n,) bool, wsum >= WEIGHT_FLOOR
    tape: object


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sdf_to_weight(s: np.ndarray, truncation: float) -> np.ndarray:
    """Bell-shaped rendering weight sigmoid(s/tr) * sigmoid(-s/tr)."""
    p = _sigmoid(np.asarray(s, dtype=float) / truncation)
    return p * (1.0 - p)


def _sample_depths(gt_depth, near_r, far_r, cfg, rng):
    """Stratified coarse + depth-guided fine samples, sorted valid-first.

    Returns (t, valid) of shape (n, S).  Padded slots hold far_r so the
    field can evaluate them safely; their weights are zeroed afterwards.
    Random draws have a fixed shape regardless of depth validity so the
    generator stream does not depend on the data.
    """
    n = len(gt_depth)
    u_c = rng.random((n, cfg.m_c))
    span = (far_r - near_r)[:, None]
    t_c = near_r[:, None] + span * (np.arange(cfg.m_c) + u_c) / cfg.m_c
    valid_c = np.ones((n, cfg.m_c), dtype=bool)

    if cfg.m_f > 0:
        u_f = rng.random((n, cfg.m_f))
        has_d = np.isfinite(gt_depth) & (gt_depth > 0)
        d = np.where(has_d, gt_depth, near_r)
        lo = np.clip(d - cfg.d_s, near_r, far_r)[:, None]
        hi = np.clip(d + cfg.d_s, near_r, far_r)[:, None]
        t_f = lo + (hi - lo) * u_f
        valid_f = np.broadcast_to(has_d[:, None], (n, cfg.m_f))
        t = np.concatenate([t_c, t_f], axis=1)
        valid = np.concatenate([valid_c, valid_f], axis=1)
    else:
        t, valid = t_c, valid_c

    key = np.where(valid, t, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    t = np.where(valid, t, far_r[:, None])
    return t, valid


def sample_ray(ray, cfg: SamplingConfig, rng) -> np.ndarray:
    """Sorted sample depths for one ray; fine band only when depth is set."""
    d = ray.gt_depth
    gt = np.array([np.nan if d is None else float(d)])
    t, valid = _sample_depths(gt, np.array([cfg.near]), np.array([cfg.far]), cfg, rng)
    return t[0][valid[0]]


def ray_box_span(origins, dirs, bounds: SceneBounds):
    """(entry, exit) distances along each ray through the box.

    entry > exit means the ray misses the box entirely.  Axis-parallel rays
    outside their slab get entry = +inf so they register as misses.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (bounds.min[None, :] - origins) / dirs
        t2 = (bounds.max[None, :] - origins) / dirs
    lo = np.nan_to_num(np.fmin(t1, t2), nan=-np.inf)
    hi = np.nan_to_num(np.fmax(t1, t2), nan=np.inf)
    return np.max(lo, axis=1), np.min(hi, axis=1)


def ray_box_exit(origins, dirs, bounds: SceneBounds) -> np.ndarray:
    """Distance along each ray to the last intersection with the box."""
    return ray_box_span(origins, dirs, bounds)[1]


def render(
    rays: RayBatch,
    field_eval: Callable,
    cfg: SamplingConfig,
    rng,
    bounds: SceneBounds | None = None,
    on_degenerate: str = "mask",
) -> RenderBatch:
    """Render a ray batch against a field.

    field_eval(x: (N,3)) must return (sdf (N,), color (N,3), tape).  With
    `bounds` set, each ray's far plane shrinks to its box exit so every
    sample stays inside the modeled volume.  Rays whose total weight falls
    below WEIGHT_FLOOR are flagged invalid (or raise when
    on_degenerate="raise") and must be excluded from losses.
    """
    n = len(rays)
    if n == 0:
        raise EmptyBatch("render needs at least one ray")

    near_r = np.full(n, cfg.near)
    far_r = np.full(n, cfg.far)
    in_box = np.ones(n, dtype=bool)
    if bounds is not None:
        enter_t, exit_t = ray_box_span(rays.origins, rays.dirs, bounds)
        near_r = np.maximum(near_r, enter_t * (1.0 + 1e-9))
        far_r = np.minimum(far_r, exit_t * (1.0 - 1e-9))
        # rays whose [near, far] segment misses the box render as invalid
        in_box = far_r > near_r
        near_r = np.where(in_box, near_r, cfg.near)
        far_r = np.where(in_box, far_r, cfg.near * (1.0 + 1e-6))

    t, valid = _sample_depths(rays.gt_depth, near_r, far_r, cfg, rng)
    valid &= in_box[:, None]
    x = rays.origins[:, None, :] + t[:, :, None] * rays.dirs[:, None, :]
    if bounds is not None and not in_box.all():
        # zero-weight placeholder samples still go through the field; keep
        # their positions legal
        x[~in_box] = np.clip(x[~in_box], bounds.min, bounds.max)

    sdf_flat, col_flat, tape = field_eval(x.reshape(-1, 3))
    sdf = sdf_flat.reshape(n, -1)
    colors = col_flat.reshape(n, -1, 3)

    sig = _sigmoid(sdf / cfg.truncation)
    weights = sig * (1.0 - sig) * valid
    wsum = weights.sum(axis=1)
    valid_ray = wsum >= WEIGHT_FLOOR
    if on_degenerate == "raise" and not valid_ray.all():
        bad = int(np.argmin(valid_ray))
        raise DegenerateRay(f"ray {bad}: total weight {wsum[bad]:.3e} below {WEIGHT_FLOOR}")

    denom = np.where(valid_ray, wsum, 1.0)
    chat = (weights[:, :, None] * colors).sum(axis=1) / denom[:, None]
    dhat = (weights * t).sum(axis=1) / denom
    chat[~valid_ray] = 0.0
    dhat[~valid_ray] = 0.0

    return RenderBatch(
        rays=rays,
        cfg=cfg,
        t=t,
        positions=x,
        sdf=sdf,
        colors=colors,
        sig=sig,
        weights=weights,
        wsum=wsum,
        chat=chat,
        dhat=dhat,
        valid_samples=valid,
        valid_ray=valid_ray,
        tape=tape,
    )


def render_backward(
    batch: RenderBatch,
    field_grad: Callable,
    grad_chat: np.ndarray,
    grad_dhat: np.ndarray,
    grad_sdf: np.ndarray,
    grads,
    need_pose_grad: bool = False,
):
    """Chain per-ray output gradients back through the renderer.

    grad_chat (n,3) and grad_dhat (n,) act on the normalized outputs;
    grad_sdf (n,S) acts directly on per-sample SDF predictions (for the
    depth-supervised terms).  Parameter gradients accumulate into `grads`
    via field_grad(tape, gs, gc, grads, need_x).  With need_pose_grad the
    return value holds d(loss)/d(twist) for a left-multiplied update:
    (6,) when rays carry no pose_ids, else (max_id + 1, 6).
    """
    v = batch.valid_ray
    gc = grad_chat * v[:, None]
    gd = grad_dhat * v
    denom = np.where(v, batch.wsum, 1.0)

    grad_c = (batch.weights / denom[:, None])[:, :, None] * gc[:, None, :]
    dL_dw = ((batch.colors - batch.chat[:, None, :]) * gc[:, None, :]).sum(axis=2)
    dL_dw += (batch.t - batch.dhat[:, None]) * gd[:, None]
    dL_dw /= denom[:, None]
    dw_ds = batch.weights * (1.0 - 2.0 * batch.sig) / batch.cfg.truncation
    gs = (dL_dw * dw_ds + grad_sdf) * batch.valid_samples

    n, S = batch.t.shape
    grad_x_flat = field_grad(
        batch.tape, gs.reshape(-1), grad_c.reshape(-1, 3), grads, need_pose_grad
    )
    if not need_pose_grad:
        return None

    gx = grad_x_flat.reshape(n, S, 3) * batch.valid_samples[:, :, None]
    g_v = gx.sum(axis=1)
    g_w = np.cross(batch.positions, gx).sum(axis=1)
    per_ray = np.concatenate([g_v, g_w], axis=1)
    if batch.rays.pose_ids is None:
        return per_ray.sum(axis=0)
    out = np.zeros((int(batch.rays.pose_ids.max()) + 1, 6))
    np.add.at(out, batch.rays.pose_ids, per_ray)
    return out
