"""Composite finite-difference audit of every learnable parameter's gradient
through the full pipeline: encodings, field MLPs, volume rendering, losses."""

import time

import numpy as np

from .encoding import (
    HashGridConfig,
    OneBlobConfig,
    SceneBounds,
    smoothness_backward,
    smoothness_sample,
)
from .mapping import SMOOTH_REGION
from .objectives import LossWeights, ray_losses
from .optim import GradCheckReport, check_gradients
from .renderer import RayBatch, SamplingConfig, render, render_backward
from .scene_field import (
    SceneGrads,
    field_functions,
    init_scene_params,
    param_arrays,
)


def named_param_arrays(params) -> list:
    """(name, array) pairs in param_arrays order."""
    named = [(f"grid_l{i}", a) for i, a in enumerate(params.grid.features)]
    for tag, mlp in (("geo", params.geo), ("color", params.color)):
        named += [(f"{tag}_w{i}", a) for i, a in enumerate(mlp.weights)]
        named += [(f"{tag}_b{i}", a) for i, a in enumerate(mlp.biases)]
    # param_arrays orders biases after weights per head; mirror that exactly
    order = (
        [f"grid_l{i}" for i in range(len(params.grid.features))]
        + [f"geo_w{i}" for i in range(len(params.geo.weights))]
        + [f"geo_b{i}" for i in range(len(params.geo.biases))]
        + [f"color_w{i}" for i in range(len(params.color.weights))]
        + [f"color_b{i}" for i in range(len(params.color.biases))]
    )
    by_name = dict(named)
    return [(n, by_name[n]) for n in order]


def build_problem(seed: int = 3):
    """Small field plus a mixed ray batch (with and without depth readings)."""
    rng = np.random.default_rng(seed)
    bounds = SceneBounds(min=np.array([-1.0, -1.0, 0.0]),
                         max=np.array([1.0, 1.0, 2.0]))
    grid = HashGridConfig(levels=4, r_min=4, finest_voxel=0.3, table_size_log2=8)
    params = init_scene_params(grid, OneBlobConfig(bins=4), bounds,
                               hidden=8, h_dim=4, truncation=0.1, rng=rng)
    # nudge the field away from its flat init so every loss term is active
    for arr in param_arrays(params):
        arr += 0.05 * rng.standard_normal(arr.shape)

    n = 10
    origins = np.column_stack([
        rng.uniform(-0.4, 0.4, n), rng.uniform(-0.4, 0.4, n), np.full(n, 0.05),
    ])
    dirs = rng.normal(size=(n, 3)) * 0.12 + [0.0, 0.0, 1.0]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    gt_depth = rng.uniform(0.8, 1.5, n)
    gt_depth[:2] = np.nan  # color-only rays exercise the no-depth path
    gt_color = rng.uniform(0.2, 0.8, (n, 3))
    rays = RayBatch(origins=origins, dirs=dirs, gt_color=gt_color, gt_depth=gt_depth)
    sampling = SamplingConfig(m_c=8, m_f=4, near=0.05, far=1.9,
                              d_s=0.025, truncation=0.1)
    return params, rays, sampling, LossWeights(), bounds


def run_suite(
    max_per_array: int = 6,
    h: float = 1e-5,
    seed: int = 3,
    weights: LossWeights | None = None,
) -> tuple[GradCheckReport, float]:
    """FD-vs-analytic over every parameter array; returns (report, seconds).

    Pass weights to audit a single loss term (zero out the others); the
    default audits the composed objective.
    """
    params, rays, sampling, default_weights, bounds = build_problem(seed)
    if weights is None:
        weights = default_weights
    ev, bw = field_functions(params)

    def total() -> float:
        batch = render(rays, ev, sampling, np.random.default_rng(0), bounds=bounds)
        smooth, _ = smoothness_sample(
            params.grid, bounds, SMOOTH_REGION, np.random.default_rng(1)
        )
        report, _ = ray_losses(batch, weights, smooth=smooth)
        return report.total

    batch = render(rays, ev, sampling, np.random.default_rng(0), bounds=bounds)
    smooth, stape = smoothness_sample(
        params.grid, bounds, SMOOTH_REGION, np.random.default_rng(1)
    )
    report, rg = ray_losses(batch, weights, smooth=smooth)
    grads = SceneGrads.zeros(params)
    render_backward(batch, bw, rg.chat, rg.dhat, rg.sdf, grads, need_pose_grad=False)
    smoothness_backward(params.grid, stape, grads.grid, weights.smooth)

    # central differences only resolve gradients down to eps*|intermediate|/h;
    # with loss terms weighted up to 1e3 that noise measures ~3e-10, so treat
    # anything below 1e-5 as zero when forming relative errors
    floor = 1e-5

    t0 = time.perf_counter()
    check = check_gradients(
        total,
        named_param_arrays(params),
        grads.arrays(),
        h=h,
        max_per_array=max_per_array,
        rng=np.random.default_rng(9),
        floor=floor,
    )
    return check, time.perf_counter() - t0
