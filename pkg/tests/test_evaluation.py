"""Mesh metrics, culling, depth L1, and ATE tests against closed-form oracles."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sdfslam.errors import EmptyMesh, LengthMismatch, NoValidViews
from sdfslam.evaluation import (
    EvalReport,
    ate_rmse,
    cull_mesh,
    depth_l1,
    mesh_metrics,
    sample_surface,
)
from sdfslam.geometry import Intrinsics, Pose, exp_map
from sdfslam.mesh import TriangleMesh, _moller_trumbore, render_depth

INTR = Intrinsics(fx=30.0, fy=30.0, cx=19.5, cy=14.5, width=40, height=30)

BEHIND = Pose(np.array(  # camera on +z axis looking back toward the origin
    [[1.0, 0, 0, 0], [0, -1.0, 0, 0], [0, 0, -1.0, 4.0], [0, 0, 0, 1.0]]
))


def grid_quad(z, half=0.5, n=4):
    """Subdivided axis-aligned quad at depth z, (n+1)^2 vertices."""
    xs = np.linspace(-half, half, n + 1)
    ys = np.linspace(-half, half, n + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))], axis=1)
    tris = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + n + 1
            tris.append([a, a + 1, b])
            tris.append([a + 1, b + 1, b])
    return verts, np.array(tris, dtype=np.int64)


def quad_mesh(z, half=0.5, n=4):
    v, t = grid_quad(z, half, n)
    return TriangleMesh(vertices=v, triangles=t)


def stacked_quads(n=4):
    """Front quad at z=1.5 fully hiding an equal back quad at z=2.5."""
    vf, tf = grid_quad(1.5, n=n)
    vb, tb = grid_quad(2.5, n=n)
    verts = np.vstack([vf, vb])
    tris = np.vstack([tf, tb + len(vf)])
    return TriangleMesh(vertices=verts, triangles=tris), len(vf)


class TestSampling:
    def test_samples_lie_on_triangle(self):
        mesh = TriangleMesh(
            vertices=np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]),
            triangles=np.array([[0, 1, 2]]),
        )
        pts = sample_surface(mesh, 500, np.random.default_rng(0))
        assert np.all(np.abs(pts[:, 2]) < 1e-15)
        assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0)
        assert np.all(pts.sum(axis=1) <= 1 + 1e-12)

    def test_area_weighting(self):
        # second triangle has 9x the area of the first
        mesh = TriangleMesh(
            vertices=np.array(
                [[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5.0, 0, 0], [8, 0, 0], [5, 3, 0]]
            ),
            triangles=np.array([[0, 1, 2], [3, 4, 5]]),
        )
        pts = sample_surface(mesh, 20_000, np.random.default_rng(1))
        frac_big = np.mean(pts[:, 0] >= 4.0)
        assert abs(frac_big - 0.9) < 0.01

    def test_empty_mesh_rejected(self):
        mesh = TriangleMesh(
            vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), dtype=np.int64)
        )
        with pytest.raises(EmptyMesh):
            sample_surface(mesh, 10, np.random.default_rng(0))


class TestMeshMetrics:
    def test_identical_meshes_exact_zero(self):
        mesh = quad_mesh(2.0, n=6)
        m = mesh_metrics(mesh, mesh, n_samples=20_000)
        assert m.accuracy == 0.0
        assert m.completion == 0.0
        assert m.completion_ratio == 100.0

    def test_translated_plane_closed_form(self):
        gt = quad_mesh(2.0, n=8)
        pred = quad_mesh(2.01, n=8)
        m = mesh_metrics(pred, gt)
        # sampled-point (not point-to-surface) distance adds ~0.8% at this density
        assert abs(m.accuracy - 1.0) < 0.02
        assert abs(m.completion - 1.0) < 0.02
        assert m.completion_ratio == 100.0

    def test_half_coverage_ratio(self):
        gt = quad_mesh(2.0, half=5.0, n=10)
        tri = gt.vertices[gt.triangles]
        left = tri[:, :, 0].mean(axis=1) < 0.0
        pred = TriangleMesh(vertices=gt.vertices, triangles=gt.triangles[left])
        m = mesh_metrics(pred, gt)
        assert abs(m.completion_ratio - 50.0) < 1.0

    def test_swap_symmetry_exact(self):
        a = quad_mesh(2.0, n=5)
        b = quad_mesh(2.2, half=0.7, n=3)
        m1 = mesh_metrics(a, b, n_samples=5_000)
        m2 = mesh_metrics(b, a, n_samples=5_000)
        assert m1.accuracy == m2.completion
        assert m1.completion == m2.accuracy


class TestCulling:
    def test_behind_camera_removed_by_frustum(self):
        verts = np.array(
            [[0.0, 0, 2], [0.3, 0, 2], [0, 0.3, 2], [0.0, 0, -1], [0.3, 0, -1], [0, 0.3, -1]]
        )
        tris = np.array([[0, 1, 2], [3, 4, 5]])
        mesh = TriangleMesh(vertices=verts, triangles=tris)
        out = cull_mesh(mesh, [Pose.identity()], INTR, strategy="frustum")
        assert out.n_triangles == 1
        assert np.all(out.vertices[:, 2] > 0)

    def test_occlusion_drops_hidden_quad(self):
        mesh, n_front = stacked_quads()
        front_only = cull_mesh(mesh, [Pose.identity()], INTR, strategy="occlusion")
        assert np.all(front_only.vertices[:, 2] < 2.0)
        assert front_only.n_vertices == n_front
        both = cull_mesh(mesh, [Pose.identity()], INTR, strategy="frustum")
        assert both.n_vertices == mesh.n_vertices

    def test_virtual_view_recovers_back_quad(self):
        mesh, _ = stacked_quads()
        out = cull_mesh(
            mesh, [Pose.identity()], INTR, strategy="virtual", virtual_poses=[BEHIND]
        )
        assert out.n_vertices == mesh.n_vertices
        assert out.n_triangles == mesh.n_triangles

    def test_explicit_depth_renders_match_self_render(self):
        mesh, _ = stacked_quads()
        renders = [render_depth(mesh, INTR, Pose.identity())]
        a = cull_mesh(mesh, [Pose.identity()], INTR, gt_depth_renders=renders)
        b = cull_mesh(mesh, [Pose.identity()], INTR)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.triangles, b.triangles)

    def test_monotone_strategies(self):
        rng = np.random.default_rng(7)
        verts = rng.normal(size=(60, 3)) * 0.4 + [0, 0, 2.0]
        tris = rng.integers(0, 60, size=(40, 3))
        mesh = TriangleMesh(vertices=verts, triangles=tris.astype(np.int64))
        poses = [Pose.identity(), Pose.from_twist(np.array([0.1, 0, 0, 0, 0.2, 0]))]
        kept_a = cull_mesh(mesh, poses, INTR, strategy="frustum")
        kept_b = cull_mesh(mesh, poses, INTR, strategy="occlusion")
        kept_c = cull_mesh(
            mesh, poses, INTR, strategy="virtual", virtual_poses=[BEHIND]
        )
        set_a = {tuple(v) for v in kept_a.vertices}
        set_b = {tuple(v) for v in kept_b.vertices}
        set_c = {tuple(v) for v in kept_c.vertices}
        assert set_b <= set_a
        assert set_b <= set_c

    def test_argument_validation(self):
        mesh = quad_mesh(2.0)
        with pytest.raises(ValueError):
            cull_mesh(mesh, [], INTR)
        with pytest.raises(ValueError):
            cull_mesh(mesh, [Pose.identity()], INTR, strategy="nonsense")
        with pytest.raises(ValueError):
            cull_mesh(mesh, [Pose.identity()], INTR, strategy="virtual")
        with pytest.raises(ValueError):
            cull_mesh(mesh, [Pose.identity()], INTR, gt_depth_renders=[])


class TestDepthL1:
    def test_identical_zero(self):
        mesh = quad_mesh(2.0, half=3.0, n=2)
        assert depth_l1(mesh, mesh, INTR, [Pose.identity()]) == 0.0

    def test_parallel_planes_offset(self):
        gt = quad_mesh(2.0, half=4.0, n=2)
        pred = quad_mesh(2.03, half=4.0, n=2)
        val = depth_l1(pred, gt, INTR, [Pose.identity()])
        assert abs(val - 3.0) < 1e-9

    def test_views_with_holes_rejected(self):
        gt = quad_mesh(2.0, half=4.0, n=2)
        pred = quad_mesh(2.03, half=4.0, n=2)
        # from z=10 the quad no longer fills the image -> holes -> rejected
        far_back = Pose(np.array(
            [[1.0, 0, 0, 0], [0, -1.0, 0, 0], [0, 0, -1.0, 10.0], [0, 0, 0, 1.0]]
        ))
        val = depth_l1(pred, gt, INTR, [far_back, Pose.identity()])
        assert abs(val - 3.0) < 1e-9
        with pytest.raises(NoValidViews):
            depth_l1(pred, gt, INTR, [far_back])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)

        def tiny_mesh(z0):
            v = np.column_stack(
                [
                    rng.uniform(-0.6, 0.6, 9),
                    rng.uniform(-0.6, 0.6, 9),
                    rng.uniform(z0, z0 + 0.5, 9),
                ]
            )
            t = np.arange(9, dtype=np.int64).reshape(3, 3)
            return TriangleMesh(vertices=v, triangles=t)

        backdrop_v, backdrop_t = grid_quad(5.0, half=8.0, n=1)
        def with_backdrop(m):
            return TriangleMesh(
                vertices=np.vstack([m.vertices, backdrop_v]),
                triangles=np.vstack([m.triangles, backdrop_t + m.n_vertices]),
            )

        pred = with_backdrop(tiny_mesh(2.0))
        gt = with_backdrop(tiny_mesh(2.2))
        intr = Intrinsics(fx=18.0, fy=18.0, cx=11.5, cy=8.5, width=24, height=18)

        def brute(mesh):
            depth = np.full((18, 24), np.nan)
            tri = mesh.vertices[mesh.triangles]
            a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
            for py in range(18):
                for px in range(24):
                    d = np.array([(px - 11.5) / 18.0, (py - 8.5) / 18.0, 1.0])
                    hit, t = _moller_trumbore(np.broadcast_to(d, a.shape), a, b, c)
                    if np.any(hit):
                        depth[py, px] = t[hit].min()
            return depth

        dp, dg = brute(pred), brute(gt)
        expect = 100.0 * np.abs(dp - dg).mean()
        assert depth_l1(pred, gt, intr, [Pose.identity()]) == pytest.approx(
            expect, abs=1e-12
        )


def circle_track(n=60):
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([np.cos(th), np.sin(th), 0.1 * th], axis=1)


class TestAteRmse:
    def test_identical_zero(self):
        p = circle_track()
        assert ate_rmse(p, p, align=True) < 1e-9  # SVD roundoff only
        assert ate_rmse(p, p, align=False) == 0.0

    def test_rigid_offset_absorbed_by_alignment(self):
        g = circle_track()
        t = exp_map(np.array([0.3, -0.2, 0.5, 0.2, -0.1, 0.4]))
        p = g @ t[:3, :3].T + t[:3, 3]
        assert ate_rmse(p, g, align=True) < 1e-7
        assert ate_rmse(p, g, align=False) > 1.0

    def test_isotropic_noise_level(self):
        rng = np.random.default_rng(5)
        g = circle_track(n=400)
        p = g + rng.normal(scale=0.01 / np.sqrt(3), size=g.shape)
        val = ate_rmse(p, g, align=True)
        assert 0.8 < val < 1.2

    def test_aligned_never_worse(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            p = rng.normal(size=(15, 3))
            g = rng.normal(size=(15, 3))
            assert ate_rmse(p, g, True) <= ate_rmse(p, g, False) + 1e-9

    def test_pose_lists_match_arrays(self):
        g = circle_track(n=10)
        poses = []
        for k, t in enumerate(g):
            m = np.eye(4)
            m[:3, 3] = t
            poses.append(Pose(m))
        p = g + 0.02
        assert ate_rmse(p, poses, align=False) == ate_rmse(p, g, align=False)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ate_rmse(circle_track(5), circle_track(6))
        with pytest.raises(ValueError):
            ate_rmse(circle_track(1), circle_track(1))


class TestEvalReport:
    def test_ratio_validated(self):
        with pytest.raises(ValueError):
            EvalReport(completion_ratio=101.0)

    def test_json_roundtrip(self, tmp_path):
        import json

        rep = EvalReport(depth_l1=1.5, accuracy=2.0, completion_ratio=97.5)
        path = tmp_path / "report.json"
        rep.save(str(path))
        data = json.loads(path.read_text())
        assert data["depth_l1"] == 1.5
        assert data["ate_rmse_aligned"] is None
