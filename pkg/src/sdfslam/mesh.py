"""Triangle meshes: isosurface extraction, ASCII PLY files, depth rasterization.

Depth maps produced here use the z convention (camera-frame z of the hit
point, not distance along the ray) so that two surfaces a fixed z apart
render a constant depth difference across the whole image.
"""

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import DatasetError, EmptySurface
from .geometry import Intrinsics, Pose

# camera-frame z below which a triangle vertex is treated as behind the camera
ZNEAR = 1e-9

# expanded (triangle, pixel) pairs processed per rasterization chunk
RASTER_CHUNK = 1 << 21


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (n, 3) float64 meters
    triangles: np.ndarray  # (m, 3) int64 indices into vertices
    colors: np.ndarray | None = None  # (n, 3) float64 in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        if self.triangles.size:
            lo, hi = self.triangles.min(), self.triangles.max()
            if lo < 0 or hi >= len(self.vertices):
                raise ValueError("triangle index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("need one color per vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)


def extract_mesh(sdf_fn, bounds, voxel_size: float, color_fn=None) -> TriangleMesh:
    """Marching cubes over a regular SDF sampling of the bounded box.

    sdf_fn maps (n, 3) world points to (n,) signed distances; the zero level
    set becomes the surface. Grid spacing is at most voxel_size per axis.
    color_fn, when given, maps vertex positions to (n, 3) colors.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    ext = bounds.extent
    ns = [max(2, int(np.ceil(e / voxel_size)) + 1) for e in ext]
    axes = [np.linspace(bounds.min[k], bounds.max[k], ns[k]) for k in range(3)]
    vol = np.empty(ns, dtype=np.float64)
    yz = np.stack(np.meshgrid(axes[1], axes[2], indexing="ij"), axis=-1)
    pts = np.empty((ns[1] * ns[2], 3))
    pts[:, 1:] = yz.reshape(-1, 2)
    for i, x in enumerate(axes[0]):  # slab at a time keeps memory flat
        pts[:, 0] = x
        vol[i] = sdf_fn(pts).reshape(ns[1], ns[2])
    if vol.min() > 0.0 or vol.max() < 0.0:
        raise EmptySurface("no zero crossing inside the extraction bounds")
    spacing = tuple(float(a[1] - a[0]) for a in axes)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=spacing)
    if len(faces) == 0:
        raise EmptySurface("marching cubes produced no faces")
    verts = verts.astype(np.float64) + bounds.min
    colors = None
    if color_fn is not None:
        colors = np.clip(np.asarray(color_fn(verts), dtype=np.float64), 0.0, 1.0)
    return TriangleMesh(vertices=verts, triangles=faces, colors=colors)


def save_ply(path, mesh: TriangleMesh) -> None:
    """ASCII PLY; vertex coordinates keep full float64 precision."""
    has_color = mesh.colors is not None
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {mesh.n_vertices}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        if has_color:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element face {mesh.n_triangles}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        if has_color:
            rgb = (np.clip(mesh.colors, 0.0, 1.0) * 255.0).round().astype(np.uint8)
            for (x, y, z), (r, g, b) in zip(mesh.vertices, rgb):
                f.write(f"{x:.17g} {y:.17g} {z:.17g} {r} {g} {b}\n")
        else:
            for x, y, z in mesh.vertices:
                f.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in mesh.triangles:
            f.write(f"3 {i} {j} {k}\n")


def load_ply(path) -> TriangleMesh:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DatasetError(f"{path}: not a PLY file")
    n_vert = n_face = None
    vert_props: list[str] = []
    element = None
    body_at = None
    for i, raw in enumerate(lines[1:], start=1):
        parts = raw.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise DatasetError(f"{path}: only ascii PLY is supported")
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
            else:
                raise DatasetError(f"{path}: unsupported element {element}")
        elif parts[0] == "property" and element == "vertex" and parts[1] != "list":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None or n_vert is None or n_face is None:
        raise DatasetError(f"{path}: incomplete PLY header")
    if vert_props[:3] != ["x", "y", "z"]:
        raise DatasetError(f"{path}: vertex properties must start with x y z")
    has_color = vert_props[3:6] == ["red", "green", "blue"]

    rows = lines[body_at : body_at + n_vert]
    if len(rows) < n_vert:
        raise DatasetError(f"{path}: truncated vertex block")
    vdata = np.array([r.split() for r in rows], dtype=np.float64)
    vertices = vdata[:, :3] if n_vert else np.zeros((0, 3))
    colors = vdata[:, 3:6] / 255.0 if (has_color and n_vert) else None

    tris = np.zeros((n_face, 3), dtype=np.int64)
    for r, raw in enumerate(lines[body_at + n_vert : body_at + n_vert + n_face]):
        parts = raw.split()
        if len(parts) != 4 or parts[0] != "3":
            raise DatasetError(f"{path}: only triangle faces are supported")
        tris[r] = [int(p) for p in parts[1:]]
    if n_face and len(lines) < body_at + n_vert + n_face:
        raise DatasetError(f"{path}: truncated face block")
    return TriangleMesh(vertices=vertices, triangles=tris, colors=colors)


def _moller_trumbore(d, a, b, c):
    """Ray-triangle test for rays from the origin along d (not normalized).

    Returns (hit, t) arrays; with direction z fixed to 1, t is camera z depth.
    """
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -a
    u = np.einsum("ij,ij->i", s, pvec) * inv
    qvec = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > ZNEAR)
    return hit, t


def render_depth(
    mesh: TriangleMesh, intr: Intrinsics, pose: Pose, max_chunk: int = RASTER_CHUNK
) -> np.ndarray:
    """(H, W) z-depth of the nearest surface, NaN where nothing is hit.

    Each triangle is tested against every pixel inside its conservative
    screen bounding box; a min z-buffer resolves visibility. Triangles with
    any vertex at or behind the camera plane are skipped.
    """
    w, h = intr.width, intr.height
    buf = np.full(w * h, np.inf)
    if mesh.n_triangles:
        rot, tr = pose.rotation, pose.translation
        vc = (mesh.vertices - tr) @ rot
        a = vc[mesh.triangles[:, 0]]
        b = vc[mesh.triangles[:, 1]]
        c = vc[mesh.triangles[:, 2]]
        zs = np.stack([a[:, 2], b[:, 2], c[:, 2]])
        front = np.min(zs, axis=0) > ZNEAR
        a, b, c = a[front], b[front], c[front]
        if len(a):
            us = np.stack([p[:, 0] / p[:, 2] * intr.fx + intr.cx for p in (a, b, c)])
            vs = np.stack([p[:, 1] / p[:, 2] * intr.fy + intr.cy for p in (a, b, c)])
            u0 = np.clip(np.floor(us.min(axis=0)), 0, w - 1).astype(np.int64)
            u1 = np.clip(np.ceil(us.max(axis=0)), 0, w - 1).astype(np.int64)
            v0 = np.clip(np.floor(vs.min(axis=0)), 0, h - 1).astype(np.int64)
            v1 = np.clip(np.ceil(vs.max(axis=0)), 0, h - 1).astype(np.int64)
            # drop triangles whose projection misses the image rectangle
            keep = (us.min(axis=0) <= w - 0.5) & (us.max(axis=0) >= -0.5)
            keep &= (vs.min(axis=0) <= h - 0.5) & (vs.max(axis=0) >= -0.5)
            bw_ = u1 - u0 + 1
            counts = np.where(keep, bw_ * (v1 - v0 + 1), 0)
            _raster_chunks(
                buf, a, b, c, u0, v0, bw_, counts, intr, w, max_chunk
            )
    out = buf.reshape(h, w)
    return np.where(np.isfinite(out), out, np.nan)


def _raster_chunks(buf, a, b, c, u0, v0, bw_, counts, intr, w, max_chunk):
    starts = np.concatenate([[0], np.cumsum(counts)])
    total = int(starts[-1])
    lo = 0
    while lo < total:
        hi = min(total, lo + max_chunk)
        span = np.arange(lo, hi)
        idx = np.searchsorted(starts, span, side="right") - 1
        k = span - starts[idx]
        px = u0[idx] + k % bw_[idx]
        py = v0[idx] + k // bw_[idx]
        d = np.stack(
            [(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, np.ones(len(px))],
            axis=-1,
        )
        hit, t = _moller_trumbore(d, a[idx], b[idx], c[idx])
        flat = (py * w + px)[hit]
        np.minimum.at(buf, flat, t[hit])
        lo = hi
