"""Tests for the training objectives.

Closed forms are worked by hand; the randomized cases are checked against
a direct loop implementation of the per-ray formulas, and the full chain
is finite-difference tested through the neural field.
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sdfslam.encoding import HashGridConfig, OneBlobConfig, SceneBounds
from sdfslam.errors import EmptyBatch
from sdfslam.objectives import LossReport, LossWeights, ray_losses, sample_bands
from sdfslam.optim import check_gradients
from sdfslam.renderer import RayBatch, RenderBatch, SamplingConfig, render, render_backward
from sdfslam.scene_field import SceneGrads, field_functions, init_scene_params, param_arrays

TR = 0.1


def fab_batch(chat, dhat, t, sdf, gt_color, gt_depth, valid_samples=None, valid_ray=None):
    """Hand-built RenderBatch so loss math can be tested in isolation."""
    chat = np.atleast_2d(np.asarray(chat, dtype=float))
    n, s = np.asarray(t).shape
    if valid_samples is None:
        valid_samples = np.ones((n, s), dtype=bool)
    if valid_ray is None:
        valid_ray = np.ones(n, dtype=bool)
    rays = RayBatch(
        origins=np.zeros((n, 3)),
        dirs=np.tile([[0.0, 0.0, 1.0]], (n, 1)),
        gt_color=np.atleast_2d(np.asarray(gt_color, dtype=float)),
        gt_depth=np.asarray(gt_depth, dtype=float),
    )
    cfg = SamplingConfig(m_c=s, m_f=0, near=0.01, far=10.0, d_s=0.025, truncation=TR)
    return RenderBatch(
        rays=rays,
        cfg=cfg,
        t=np.asarray(t, dtype=float),
        positions=np.zeros((n, s, 3)),
        sdf=np.asarray(sdf, dtype=float),
        colors=np.zeros((n, s, 3)),
        sig=np.full((n, s), 0.5),
        weights=np.full((n, s), 0.25) * valid_samples,
        wsum=0.25 * valid_samples.sum(1),
        chat=chat,
        dhat=np.asarray(dhat, dtype=float),
        valid_samples=valid_samples,
        valid_ray=valid_ray,
        tape=None,
    )


class TestClosedForms:
    def test_rgb_single_ray(self):
        b = fab_batch(
            chat=[[0.6, 0.5, 0.5]], dhat=[1.0], t=[[1.0, 2.0]], sdf=[[0.0, 0.0]],
            gt_color=[[0.5, 0.5, 0.5]], gt_depth=[np.nan],
        )
        report, _ = ray_losses(b, LossWeights())
        assert_allclose(report.rgb, 0.01 / 3, rtol=1e-15)

    def test_depth_single_ray(self):
        b = fab_batch(
            chat=[[0.5, 0.5, 0.5]], dhat=[1.05], t=[[1.0, 2.0]], sdf=[[0.0, 0.0]],
            gt_color=[[0.5, 0.5, 0.5]], gt_depth=[1.0],
        )
        report, _ = ray_losses(b, LossWeights())
        assert_allclose(report.depth, 0.0025, rtol=1e-12)

    def test_sdf_single_sample(self):
        # sample at t=1.0 with D=1.03 sits in the truncation band; the
        # t=2.0 sample is far behind the surface and must be excluded
        b = fab_batch(
            chat=[[0.5, 0.5, 0.5]], dhat=[1.0], t=[[1.0, 2.0]], sdf=[[0.07, 0.0]],
            gt_color=[[0.5, 0.5, 0.5]], gt_depth=[1.03],
        )
        report, _ = ray_losses(b, LossWeights())
        assert_allclose(report.sdf, (0.07 - 0.03) ** 2, rtol=1e-12)

    def test_free_space_zero_prediction_costs_tr_squared(self):
        b = fab_batch(
            chat=[[0.5, 0.5, 0.5]], dhat=[1.0], t=[[0.5, 1.0]], sdf=[[0.0, 0.0]],
            gt_color=[[0.5, 0.5, 0.5]], gt_depth=[1.0],
        )
        report, _ = ray_losses(b, LossWeights())
        assert_allclose(report.free_space, TR**2, rtol=1e-15)
        assert report.sdf == 0.0

    def test_per_ray_sample_count_normalization(self):
        # ray A: two band samples with residual 0.1; ray B: one with 0.2
        b = fab_batch(
            chat=[[0.5] * 3, [0.5] * 3],
            dhat=[1.0, 1.0],
            t=[[0.98, 1.02], [1.0, 3.0]],
            sdf=[[0.12, 0.08], [0.2, 0.0]],
            gt_color=[[0.5] * 3, [0.5] * 3],
            gt_depth=[1.0, 1.0],
        )
        report, _ = ray_losses(b, LossWeights())
        expect = 0.5 * (0.5 * (0.1**2 + 0.1**2) + 0.2**2)
        assert_allclose(report.sdf, expect, rtol=1e-14)


class TestBands:
    def test_partition_of_valid_depth_samples(self):
        rng = np.random.default_rng(3)
        t = np.sort(rng.uniform(0.1, 4.0, (50, 20)), axis=1)
        d = np.where(rng.random(50) < 0.8, rng.uniform(0.5, 3.5, 50), np.nan)
        valid = rng.random((50, 20)) < 0.9
        fs, band = sample_bands(t, d, valid, TR)
        behind = valid & np.isfinite(d)[:, None] & ((d[:, None] - t) < -TR)
        counts = fs.astype(int) + band.astype(int) + behind.astype(int)
        has_d = np.isfinite(d)
        assert np.all(counts[has_d][valid[has_d]] == 1)
        assert not np.any(fs[~has_d]) and not np.any(band[~has_d])
        assert not np.any(fs[~valid]) and not np.any(band[~valid])

    def test_boundary_sample_belongs_to_band(self):
        # 0.125 is exactly representable, so both diffs land on the boundary
        t = np.array([[0.875, 1.125]])
        d = np.array([1.0])
        fs, band = sample_bands(t, d, np.ones((1, 2), dtype=bool), 0.125)
        assert np.all(band[0]) and not np.any(fs[0])


def loop_oracle(batch, tr):
    """Direct per-ray translation of the loss formulas."""
    rgb = depth = sdf = fs = 0.0
    n_valid = int(batch.valid_ray.sum())
    depth_rays = []
    for r in range(len(batch.t)):
        if not batch.valid_ray[r]:
            continue
        gt_c = batch.rays.gt_color[r]
        rgb += float(np.sum((batch.chat[r] - gt_c) ** 2)) / 3.0
        d = batch.rays.gt_depth[r]
        if np.isfinite(d) and d > 0:
            depth_rays.append(r)
            depth += (batch.dhat[r] - d) ** 2
    rgb /= n_valid
    nd = len(depth_rays)
    if nd:
        depth /= nd
        for r in depth_rays:
            band_terms, fs_terms = [], []
            for p in range(batch.t.shape[1]):
                if not batch.valid_samples[r, p]:
                    continue
                diff = batch.rays.gt_depth[r] - batch.t[r, p]
                if abs(diff) <= tr:
                    band_terms.append((batch.sdf[r, p] - diff) ** 2)
                elif diff > tr:
                    fs_terms.append((batch.sdf[r, p] - tr) ** 2)
            if band_terms:
                sdf += np.mean(band_terms)
            if fs_terms:
                fs += np.mean(fs_terms)
        sdf /= nd
        fs /= nd
    return rgb, depth, sdf, fs


class TestAgainstLoopOracle:
    def test_random_batch_matches(self):
        rng = np.random.default_rng(9)
        n, s = 24, 15
        t = np.sort(rng.uniform(0.1, 4.0, (n, s)), axis=1)
        d = np.where(rng.random(n) < 0.7, rng.uniform(0.5, 3.5, n), np.nan)
        valid_s = rng.random((n, s)) < 0.85
        valid_r = rng.random(n) < 0.9
        valid_r[0] = True
        b = fab_batch(
            chat=rng.random((n, 3)), dhat=rng.uniform(0.5, 3.5, n), t=t,
            sdf=rng.normal(0, 0.1, (n, s)), gt_color=rng.random((n, 3)),
            gt_depth=d, valid_samples=valid_s, valid_ray=valid_r,
        )
        report, _ = ray_losses(b, LossWeights())
        rgb, depth, sdf, fs = loop_oracle(b, TR)
        assert_allclose(report.rgb, rgb, rtol=1e-13)
        assert_allclose(report.depth, depth, rtol=1e-13)
        assert_allclose(report.sdf, sdf, rtol=1e-13)
        assert_allclose(report.free_space, fs, rtol=1e-13)


class TestReport:
    def test_no_depth_rays_flag(self):
        b = fab_batch(
            chat=[[0.6, 0.5, 0.5]], dhat=[1.0], t=[[1.0, 2.0]], sdf=[[0.0, 0.0]],
            gt_color=[[0.5, 0.5, 0.5]], gt_depth=[np.nan],
        )
        report, grads = ray_losses(b, LossWeights())
        assert report.no_depth_rays
        assert report.depth == 0.0 and report.sdf == 0.0 and report.free_space == 0.0
        assert np.all(grads.dhat == 0.0) and np.all(grads.sdf == 0.0)

    def test_all_degenerate_raises(self):
        b = fab_batch(
            chat=[[0.5, 0.5, 0.5]], dhat=[1.0], t=[[1.0, 2.0]], sdf=[[0.0, 0.0]],
            gt_color=[[0.5, 0.5, 0.5]], gt_depth=[1.0],
            valid_ray=np.array([False]),
        )
        with pytest.raises(EmptyBatch):
            ray_losses(b, LossWeights())

    def test_total_is_weighted_sum(self):
        w = LossWeights()
        report = LossReport.build(
            w, rgb=0.013, depth=0.002, sdf=3.1e-4, free_space=7e-4, smooth=2.2e-3,
            n_rays=100, n_depth_rays=80, n_degenerate=2,
        )
        manual = 5 * 0.013 + 0.1 * 0.002 + 1000 * 3.1e-4 + 10 * 7e-4 + 1e-6 * 2.2e-3
        assert abs(report.total - manual) < 1e-12

    def test_json_line_roundtrip(self):
        report = LossReport.build(
            LossWeights(), rgb=0.01, depth=0.0, sdf=0.0, free_space=0.0, smooth=0.0,
            n_rays=10, n_depth_rays=0, n_degenerate=1, no_depth_rays=True,
        )
        back = json.loads(report.json_line())
        assert back["rgb"] == 0.01
        assert back["no_depth_rays"] is True
        assert back["total"] == pytest.approx(report.total)


class TestFullChainGradients:
    def make_setup(self):
        bounds = SceneBounds(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
        grid_cfg = HashGridConfig(
            levels=3, r_min=4, finest_voxel=0.25, table_size_log2=6, feature_dim=2
        )
        params = init_scene_params(
            grid_cfg, OneBlobConfig(), bounds, hidden=32, h_dim=15,
            truncation=TR, rng=np.random.default_rng(12),
        )
        rng = np.random.default_rng(4)
        o = rng.uniform(-0.3, 0.3, (6, 3))
        d = rng.standard_normal((6, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        gt_d = np.array([0.6, 0.8, np.nan, 0.5, 0.7, np.nan])
        rays = RayBatch(
            origins=o, dirs=d, gt_color=rng.random((6, 3)), gt_depth=gt_d
        )
        cfg = SamplingConfig(m_c=8, m_f=3, near=0.05, far=2.0, d_s=0.025, truncation=TR)
        return params, bounds, rays, cfg

    @pytest.mark.parametrize(
        "weights",
        [
            LossWeights(rgb=1.0, depth=0.0, sdf=0.0, free_space=0.0),
            LossWeights(rgb=0.0, depth=1.0, sdf=0.0, free_space=0.0),
            LossWeights(rgb=0.0, depth=0.0, sdf=1.0, free_space=0.0),
            LossWeights(rgb=0.0, depth=0.0, sdf=0.0, free_space=1.0),
            LossWeights(),
        ],
        ids=["rgb", "depth", "sdf", "free_space", "composite"],
    )
    def test_param_gradients_match_fd(self, weights):
        params, bounds, rays, cfg = self.make_setup()
        ev, bw = field_functions(params)

        def forward():
            batch = render(rays, ev, cfg, np.random.default_rng(77), bounds=bounds)
            return batch, ray_losses(batch, weights)

        batch, (report, rg) = forward()
        grads = SceneGrads.zeros(params)
        render_backward(batch, bw, rg.chat, rg.dhat, rg.sdf, grads)

        named = [(f"p{i}", a) for i, a in enumerate(param_arrays(params))]
        report_fd = check_gradients(
            lambda: forward()[1][0].total,
            named,
            grads.arrays(),
            h=1e-5,
            max_per_array=6,
            rng=np.random.default_rng(5),
            floor=1e-6,
        )
        assert report_fd.ok(1e-4), report_fd.worst
