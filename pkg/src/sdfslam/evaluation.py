"""Reconstruction and trajectory metrics: mesh culling, surface distances, depth L1, ATE.

Distances are computed in meters internally; every public metric is returned in
centimeters (completion ratio in percent) because these values feed reports.
"""

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, LengthMismatch, NoValidViews
from .geometry import Intrinsics, Pose
from .mesh import TriangleMesh, render_depth

# Vertex depth-test slack in meters. Absorbs rasterization rounding; a culled
# vertex sits on the same surface the depth map sampled, so 1 cm is generous.
OCCLUSION_TOL = 0.01

CULL_STRATEGIES = ("frustum", "occlusion", "virtual")


class MeshMetrics(NamedTuple):
    accuracy: float          # cm, pred -> gt
    completion: float        # cm, gt -> pred
    completion_ratio: float  # percent of gt samples within threshold


@dataclass
class EvalReport:
    """Self-describing bundle of end-of-run quality numbers (cm / percent)."""

    depth_l1: Optional[float] = None
    accuracy: Optional[float] = None
    completion: Optional[float] = None
    completion_ratio: Optional[float] = None
    ate_rmse_aligned: Optional[float] = None
    ate_rmse_unaligned: Optional[float] = None

    def __post_init__(self):
        r = self.completion_ratio
        if r is not None and not 0.0 <= r <= 100.0:
            raise ValueError(f"completion_ratio {r} outside [0, 100]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted point samples, shape (n, 3)."""
    if mesh.n_triangles == 0:
        raise EmptyMesh("mesh has no triangles")
    tri = mesh.vertices[mesh.triangles]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    total = float(area.sum())
    if total <= 0.0:
        raise EmptyMesh("mesh has zero surface area")
    idx = rng.choice(mesh.n_triangles, size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tri[idx, 0], tri[idx, 1], tri[idx, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def mesh_metrics(
    pred: TriangleMesh,
    gt: TriangleMesh,
    n_samples: int = 200_000,
    threshold: float = 0.05,
    seed: int = 0,
) -> MeshMetrics:
    """Two-sided sampled surface distance.

    Both meshes are sampled with an identically seeded generator, so comparing
    a mesh against itself yields exactly zero and swapping the arguments
    exchanges accuracy and completion exactly.
    """
    p = sample_surface(pred, n_samples, np.random.default_rng(seed))
    q = sample_surface(gt, n_samples, np.random.default_rng(seed))
    d_pq = cKDTree(q).query(p, k=1)[0]
    d_qp = cKDTree(p).query(q, k=1)[0]
    ratio = 100.0 * float(np.mean(d_qp <= threshold))
    return MeshMetrics(100.0 * float(d_pq.mean()), 100.0 * float(d_qp.mean()), ratio)


def _visible_vertices(verts, intr: Intrinsics, pose: Pose, depth=None, tol=OCCLUSION_TOL):
    """Boolean mask of vertices inside the view frustum (and unoccluded if depth given)."""
    vc = (verts - pose.translation) @ pose.rotation
    z = vc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = intr.fx * vc[:, 0] / zs + intr.cx
    v = intr.fy * vc[:, 1] / zs + intr.cy
    vis = (
        front
        & (u >= -0.5) & (u <= intr.width - 0.5)
        & (v >= -0.5) & (v <= intr.height - 0.5)
    )
    if depth is None:
        return vis
    # max over the 3x3 window: silhouette vertices round to a pixel just past
    # their own footprint, and a vertex next to an occluder edge should compare
    # against the surface it actually lies on, not the nearer occluder
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    best = np.full(z.shape, -np.inf)
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            uu = np.clip(ui + du, 0, intr.width - 1)
            vv = np.clip(vi + dv, 0, intr.height - 1)
            d = depth[vv, uu]
            best = np.maximum(best, np.where(np.isfinite(d), d, -np.inf))
    # a window with no depth at all is no evidence the vertex was observed
    return vis & np.isfinite(best) & (z <= best + tol)


def cull_mesh(
    mesh: TriangleMesh,
    poses: Sequence[Pose],
    intr: Intrinsics,
    gt_depth_renders: Optional[Sequence[np.ndarray]] = None,
    strategy: str = "occlusion",
    virtual_poses: Optional[Sequence[Pose]] = None,
    tol: float = OCCLUSION_TOL,
) -> TriangleMesh:
    """Drop mesh regions no camera observed.

    strategy "frustum": keep vertices inside at least one view frustum.
    strategy "occlusion": additionally require the vertex to pass a depth test
    in at least one view; depth maps come from gt_depth_renders when supplied,
    otherwise from rendering the mesh itself (self-occlusion only).
    strategy "virtual": "occlusion" plus extra user-supplied poses whose depth
    is always self-rendered, used to recover regions hidden in every real view.

    Triangles with any dropped vertex are removed; surviving vertices are
    reindexed. The result can be empty.
    """
    if strategy not in CULL_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if len(poses) == 0:
        raise ValueError("trajectory is empty")
    if gt_depth_renders is not None and len(gt_depth_renders) != len(poses):
        raise ValueError("one depth render per pose required")
    if strategy == "virtual" and not virtual_poses:
        raise ValueError("strategy 'virtual' needs virtual_poses")

    keep = np.zeros(mesh.n_vertices, dtype=bool)
    for i, pose in enumerate(poses):
        if strategy == "frustum":
            depth = None
        elif gt_depth_renders is not None:
            depth = gt_depth_renders[i]
        else:
            depth = render_depth(mesh, intr, pose)
        keep |= _visible_vertices(mesh.vertices, intr, pose, depth, tol)
    if strategy == "virtual":
        for pose in virtual_poses:
            depth = render_depth(mesh, intr, pose)
            keep |= _visible_vertices(mesh.vertices, intr, pose, depth, tol)

    tri_keep = keep[mesh.triangles].all(axis=1)
    new_index = np.cumsum(keep) - 1
    vertices = mesh.vertices[keep].reshape(-1, 3)
    triangles = new_index[mesh.triangles[tri_keep]].reshape(-1, 3)
    colors = None if mesh.colors is None else mesh.colors[keep].reshape(-1, 3)
    return TriangleMesh(vertices=vertices, triangles=triangles, colors=colors)


def depth_l1(
    pred: TriangleMesh,
    gt: TriangleMesh,
    intr: Intrinsics,
    poses: Sequence[Pose],
) -> float:
    """Mean |pred - gt| of ray-cast depth over views, in cm.

    A view whose ground-truth render contains any hole is rejected (it looks at
    unobserved space); within accepted views only pixels valid in both renders
    are compared.
    """
    if len(poses) == 0:
        raise ValueError("need at least one view")
    diffs = []
    for pose in poses:
        dg = render_depth(gt, intr, pose)
        if not np.all(np.isfinite(dg)):
            continue
        dp = render_depth(pred, intr, pose)
        valid = np.isfinite(dp)
        if valid.any():
            diffs.append(np.abs(dp[valid] - dg[valid]))
    if not diffs:
        raise NoValidViews("every view saw unobserved space")
    return 100.0 * float(np.concatenate(diffs).mean())


def _translations(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        pts = np.asarray(traj, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("expected (n, 3) translations")
        return pts
    return np.array([p.translation for p in traj], dtype=np.float64)


def align_trajectories(pred: np.ndarray, gt: np.ndarray):
    """Closed-form least-squares rigid transform (R, t) minimizing |R p + t - g|^2."""
    pc = pred.mean(axis=0)
    gc = gt.mean(axis=0)
    h = (pred - pc).T @ (gt - gc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, gc - rot @ pc


def ate_rmse(pred_traj, gt_traj, align: bool = True) -> float:
    """Absolute trajectory error RMSE over translations, in cm."""
    p = _translations(pred_traj)
    g = _translations(gt_traj)
    if len(p) != len(g):
        raise LengthMismatch(f"{len(p)} poses vs {len(g)}")
    if len(p) < 2:
        raise ValueError("need at least 2 poses")
    if align:
        rot, t = align_trajectories(p, g)
        res = p @ rot.T + t - g
    else:
        res = p - g
    return 100.0 * float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
