"""Loss terms over rendered ray batches and their output-space gradients.

Color and depth act on the weight-averaged ray outputs; the SDF and
free-space terms supervise individual samples on rays that carry a sensor
depth, normalized per ray by the number of contributing samples.  All
gradients returned here are for the weighted total, so one renderer
backward pass handles the composite objective.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch
from .renderer import RenderBatch


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 5.0
    depth: float = 0.1
    sdf: float = 1000.0
    free_space: float = 10.0
    smooth: float = 1e-6


@dataclass
class RayGrads:
    """d(total)/d(chat), d(total)/d(dhat), d(total)/d(per-sample sdf)."""

    chat: np.ndarray
    dhat: np.ndarray
    sdf: np.ndarray


@dataclass
class LossReport:
    rgb: float
    depth: float
    sdf: float
    free_space: float
    smooth: float
    total: float
    n_rays: int
    n_depth_rays: int
    n_degenerate: int
    no_depth_rays: bool

    @staticmethod
    def build(
        weights: LossWeights,
        rgb: float,
        depth: float,
        sdf: float,
        free_space: float,
        smooth: float,
        n_rays: int,
        n_depth_rays: int,
        n_degenerate: int,
        no_depth_rays: bool = False,
    ) -> "LossReport":
        total = (
            weights.rgb * rgb
            + weights.depth * depth
            + weights.sdf * sdf
            + weights.free_space * free_space
            + weights.smooth * smooth
        )
        return LossReport(
            rgb=rgb,
            depth=depth,
            sdf=sdf,
            free_space=free_space,
            smooth=smooth,
            total=total,
            n_rays=n_rays,
            n_depth_rays=n_depth_rays,
            n_degenerate=n_degenerate,
            no_depth_rays=no_depth_rays,
        )

    def json_line(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def sample_bands(t, gt_depth, valid_samples, truncation):
    """Split samples of depth-carrying rays into free-space and band sets.

    diff = D - t.  Free space: diff > truncation.  Truncation band:
    |diff| <= truncation.  Samples more than `truncation` behind the
    surface fall in neither set.  Rays without a finite positive depth
    contribute nothing.
    """
    has_d = np.isfinite(gt_depth) & (gt_depth > 0)
    diff = np.where(has_d, gt_depth, 0.0)[:, None] - t
    base = valid_samples & has_d[:, None]
    band = base & (np.abs(diff) <= truncation)
    fs = base & (diff > truncation)
    return fs, band


def ray_losses(
    batch: RenderBatch, weights: LossWeights, smooth: float = 0.0
) -> tuple[LossReport, RayGrads]:
    """Evaluate the photometric, depth, SDF, and free-space terms.

    Degenerate rays are dropped from every sum.  When no surviving ray has
    a sensor depth, the depth-supervised terms contribute zero and the
    report's no_depth_rays flag is set.  `smooth` is a precomputed feature
    smoothness value folded into the report total.
    """
    v = batch.valid_ray
    n = int(v.sum())
    if n == 0:
        raise EmptyBatch("all rays in the batch are degenerate")
    tr = batch.cfg.truncation
    gt_c = batch.rays.gt_color
    gt_d = batch.rays.gt_depth

    resid_c = (batch.chat - gt_c) * v[:, None]
    loss_rgb = float(np.sum(resid_c**2)) / (3.0 * n)
    grad_chat = weights.rgb * 2.0 * resid_c / (3.0 * n)

    has_d = np.isfinite(gt_d) & (gt_d > 0)
    rd = v & has_d
    n_d = int(rd.sum())
    grad_dhat = np.zeros_like(batch.dhat)
    grad_sdf = np.zeros_like(batch.sdf)
    loss_d = loss_sdf = loss_fs = 0.0
    if n_d > 0:
        resid_d = np.where(rd, batch.dhat - gt_d, 0.0)
        loss_d = float(np.sum(resid_d**2)) / n_d
        grad_dhat = weights.depth * 2.0 * resid_d / n_d

        fs, band = sample_bands(batch.t, gt_d, batch.valid_samples, tr)
        fs &= v[:, None]
        band &= v[:, None]
        diff = np.where(has_d, gt_d, 0.0)[:, None] - batch.t

        cnt_band = band.sum(axis=1)
        safe_band = np.maximum(cnt_band, 1)
        resid_band = np.where(band, batch.sdf - diff, 0.0)
        loss_sdf = float(np.sum(resid_band**2 / safe_band[:, None])) / n_d
        grad_sdf += weights.sdf * 2.0 * resid_band / (safe_band[:, None] * n_d)

        cnt_fs = fs.sum(axis=1)
        safe_fs = np.maximum(cnt_fs, 1)
        resid_fs = np.where(fs, batch.sdf - tr, 0.0)
        loss_fs = float(np.sum(resid_fs**2 / safe_fs[:, None])) / n_d
        grad_sdf += weights.free_space * 2.0 * resid_fs / (safe_fs[:, None] * n_d)

    report = LossReport.build(
        weights,
        rgb=loss_rgb,
        depth=loss_d,
        sdf=loss_sdf,
        free_space=loss_fs,
        smooth=smooth,
        n_rays=n,
        n_depth_rays=n_d,
        n_degenerate=int((~v).sum()),
        no_depth_rays=n_d == 0,
    )
    return report, RayGrads(chat=grad_chat, dhat=grad_dhat, sdf=grad_sdf)
