"""Analytic room scene, exact renderer, and on-disk dataset generator.

The scene is a closed axis-aligned room with a few solid primitives inside,
described by an exact signed distance function (positive in free space).
Depth comes from sphere tracing that SDF, color from a fixed directional
light over per-primitive albedo, so every generated pixel has a closed-form
ground truth.

The written dataset uses the first camera as the world frame: the first
trajectory line is the identity pose and the ground-truth mesh vertices are
expressed in that same frame, matching a SLAM run that starts at identity.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .dataio import save_trajectory, write_color_png, write_depth_png, write_intrinsics
from .encoding import SceneBounds
from .errors import CameraInsideGeometry
from .geometry import Intrinsics, Pose
from .mesh import TriangleMesh, extract_mesh, save_ply

# default camera: 80x60 with ~82 degree horizontal field of view
FX_PER_WIDTH = 0.575
FPS = 30.0


@dataclass
class SyntheticScene:
    room_half: np.ndarray = field(default_factory=lambda: np.array([2.0, 1.5, 1.25]))
    sphere_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sphere_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    box_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_halves: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    wall_colors: np.ndarray = field(
        default_factory=lambda: np.array([[0.82, 0.78, 0.70], [0.38, 0.45, 0.58]])
    )
    sphere_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    checker_period: float = 0.5
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.4, -0.25, 0.8]))
    ambient: float = 0.35
    diffuse: float = 0.65

    def __post_init__(self):
        for name in (
            "room_half",
            "sphere_centers",
            "sphere_radii",
            "box_centers",
            "box_halves",
            "wall_colors",
            "sphere_colors",
            "box_colors",
            "light_dir",
        ):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)


def default_scene() -> SyntheticScene:
    """Room with one sphere resting on the floor and one box beside it."""
    return SyntheticScene(
        sphere_centers=np.array([[1.1, 0.55, -0.85]]),
        sphere_radii=np.array([0.4]),
        sphere_colors=np.array([[0.75, 0.22, 0.18]]),
        box_centers=np.array([[-1.05, -0.65, -0.8]]),
        box_halves=np.array([[0.4, 0.35, 0.45]]),
        box_colors=np.array([[0.2, 0.55, 0.3]]),
    )


def empty_room() -> SyntheticScene:
    return SyntheticScene()


def _box_sdf(x, center, half):
    q = np.abs(x - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(q.max(axis=-1), 0.0)


def _primitive_sdfs(scene: SyntheticScene, x: np.ndarray) -> np.ndarray:
    """(n, 1 + spheres + boxes) distances; column 0 is the room shell."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cols = [-_box_sdf(x, np.zeros(3), scene.room_half)]
    for c, r in zip(scene.sphere_centers, scene.sphere_radii):
        cols.append(np.linalg.norm(x - c, axis=-1) - r)
    for c, h in zip(scene.box_centers, scene.box_halves):
        cols.append(_box_sdf(x, c, h))
    return np.stack(cols, axis=-1)


def scene_sdf(scene: SyntheticScene, x: np.ndarray) -> np.ndarray:
    """Exact signed distance, positive inside the room's free space."""
    return _primitive_sdfs(scene, x).min(axis=-1)


def scene_normal(scene: SyntheticScene, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.atleast_2d(x)
    grad = np.empty_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = (scene_sdf(scene, x + e) - scene_sdf(scene, x - e)) / (2 * h)
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.maximum(norms, 1e-12)


def scene_albedo(scene: SyntheticScene, x: np.ndarray) -> np.ndarray:
    """Albedo of the nearest primitive; walls carry a 3D checker pattern."""
    x = np.atleast_2d(x)
    nearest = np.argmin(np.abs(_primitive_sdfs(scene, x)), axis=-1)
    # lattice shifted a quarter period so wall planes sit mid-cell
    cells = np.floor((x + 0.25 * scene.checker_period) / scene.checker_period)
    parity = (cells.sum(axis=-1) % 2).astype(int)
    out = scene.wall_colors[parity]
    table = np.concatenate([scene.sphere_colors, scene.box_colors])
    solid = nearest >= 1
    if np.any(solid):
        out = out.copy()
        out[solid] = table[nearest[solid] - 1]
    return out


def shade(scene: SyntheticScene, x: np.ndarray) -> np.ndarray:
    lam = scene_normal(scene, x) @ scene.light_dir
    gain = np.clip(scene.ambient + scene.diffuse * np.clip(lam, 0.0, None), 0.0, 1.0)
    return scene_albedo(scene, x) * gain[:, None]


def raycast(
    scene: SyntheticScene,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_max: float = 8.0,
    tol: float = 1e-5,
    max_steps: int = 512,
):
    """Sphere-trace distances along unit rays: (t, hit_mask).

    With an exact SDF the march never overshoots, so convergence to tol is
    a straight iteration; rays that leave t_max are misses.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(origins)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        ids = np.flatnonzero(alive)
        if not len(ids):
            break
        x = origins[ids] + t[ids, None] * dirs[ids]
        d = scene_sdf(scene, x)
        conv = d < tol
        hit[ids[conv]] = True
        alive[ids[conv]] = False
        t[ids] += np.maximum(d, 0.0)
        over = t[ids] > t_max
        alive[ids[over]] = False
    return t, hit


def render_frame(scene: SyntheticScene, intr: Intrinsics, pose: Pose):
    """Exact image from one camera: (color (H,W,3), z-depth, range).

    Depth arrays are NaN where the ray escapes (open scenes only). The
    z-depth is the sensor convention; range is distance along the unit ray.
    """
    w, h = intr.width, intr.height
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d_cam = np.stack(
        [
            (uu.ravel() - intr.cx) / intr.fx,
            (vv.ravel() - intr.cy) / intr.fy,
            np.ones(w * h),
        ],
        axis=1,
    )
    fac = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / fac[:, None]) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t, hit = raycast(scene, origins, dirs)
    color = np.zeros((w * h, 3))
    if np.any(hit):
        color[hit] = shade(scene, origins[hit] + t[hit, None] * dirs[hit])
    rng_d = np.where(hit, t, np.nan)
    z = rng_d / fac
    return (
        color.reshape(h, w, 3),
        z.reshape(h, w),
        rng_d.reshape(h, w),
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose: +z forward toward target, image down = -up."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=np.float64)
    y = f * (f @ u) - u  # camera down axis
    y = y / np.linalg.norm(y)
    x = np.cross(y, f)
    mat = np.eye(4)
    mat[:3, :3] = np.stack([x, y, f], axis=1)
    mat[:3, 3] = eye
    return Pose(mat)


def orbit_trajectory(
    n_frames: int,
    radius: float = 0.85,
    height: float = 0.15,
    total_angle: float = 2.0 * np.pi,
    wobble_amp: float = 0.1,
    wobble_phase: float = 0.7,
    target_amp: float = 0.22,
    target_phase: float = 2.1,
    ramp_frames: int = 15,
) -> list[Pose]:
    """Inward-looking orbit around the room center.

    Angular speed ramps linearly over the first ramp_frames steps so the
    first inter-frame motion stays small, then holds constant; a constant
    step is a fixed screw motion, which a constant-velocity motion model
    predicts exactly, so prediction error is bounded by the ramp and the
    slow height/pitch modulation rather than by the orbit speed.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    ramp = max(1, min(ramp_frames, max(1, (n_frames - 1) // 3)))
    if n_frames == 1:
        phis = np.array([0.0])
    else:
        omega = total_angle / ((n_frames - 1) - (ramp - 1) / 2)
        steps = omega * np.minimum(np.arange(1, n_frames), ramp) / ramp
        phis = np.concatenate([[0.0], np.cumsum(steps)])
    poses = []
    for phi in phis:
        eye = np.array(
            [
                radius * np.cos(phi),
                radius * np.sin(phi),
                height + wobble_amp * np.sin(phi + wobble_phase),
            ]
        )
        target = np.array([0.0, 0.0, target_amp * np.sin(phi + target_phase)])
        poses.append(look_at(eye, target))
    return poses


def validate_free_space(scene: SyntheticScene, poses, margin: float = 0.15) -> None:
    eyes = np.stack([p.translation for p in poses])
    sd = scene_sdf(scene, eyes)
    worst = int(np.argmin(sd))
    if sd[worst] <= margin:
        raise CameraInsideGeometry(
            f"camera {worst} has clearance {sd[worst]:.3f} m <= margin {margin} m"
        )


def world_bounds(scene: SyntheticScene, pose0: Pose, pad: float = 0.2) -> SceneBounds:
    """AABB of the room in the first-camera frame, padded."""
    h = scene.room_half
    corners = np.array(
        [[sx * h[0], sy * h[1], sz * h[2]] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    )
    rot, tr = pose0.rotation, pose0.translation
    cw = (corners - tr) @ rot
    return SceneBounds(min=cw.min(axis=0) - pad, max=cw.max(axis=0) + pad)


def generate_synthetic(
    out_dir: str,
    scene: SyntheticScene | None = None,
    n_frames: int = 50,
    width: int = 80,
    height: int = 60,
    noise_sigma: float = 0.005,
    seed: int = 0,
    far: float = 3.3,
    gt_mesh_voxel: float = 0.03,
    margin: float = 0.15,
    trajectory_kwargs: dict | None = None,
) -> dict:
    """Write a complete synthetic dataset; returns its in-memory summary.

    Layout: intrinsics.txt, frames/NNNN.{color,depth}.png, trajectory.txt,
    gt_mesh.ply, bounds.txt. Depth images hold sensor z-depth; pixels whose
    ray range exceeds `far` are written as holes (zero). Gaussian noise of
    noise_sigma meters is added to surviving depth values. All poses and the
    mesh are expressed in the first camera's frame.
    """
    if width < 16 or height < 16:
        raise ValueError("resolution must be at least 16x16")
    if scene is None:
        scene = default_scene()
    intr = Intrinsics(
        fx=FX_PER_WIDTH * width,
        fy=FX_PER_WIDTH * width,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )
    poses_scene = orbit_trajectory(n_frames, **(trajectory_kwargs or {}))
    validate_free_space(scene, poses_scene, margin=margin)

    pose0 = poses_scene[0]
    inv0 = pose0.inverse()
    poses_world = [inv0.compose(p) for p in poses_scene]
    bounds = world_bounds(scene, pose0)

    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    rng = np.random.default_rng(seed)
    for k, pose in enumerate(poses_scene):
        color, z, rng_d = render_frame(scene, intr, pose)
        z = np.where(rng_d <= far, z, np.nan)
        noisy = z + noise_sigma * rng.standard_normal(z.shape)
        noisy = np.maximum(noisy, 0.05)
        stem = os.path.join(out_dir, "frames", f"{k:04d}")
        write_color_png(stem + ".color.png", color)
        write_depth_png(stem + ".depth.png", noisy, intr.depth_scale)
    write_intrinsics(os.path.join(out_dir, "intrinsics.txt"), intr)
    save_trajectory(
        os.path.join(out_dir, "trajectory.txt"),
        np.arange(n_frames) / FPS,
        poses_world,
    )

    ext_bounds = SceneBounds(
        min=-scene.room_half - 0.15, max=scene.room_half + 0.15
    )
    extracted = extract_mesh(
        lambda x: scene_sdf(scene, x),
        ext_bounds,
        gt_mesh_voxel,
        color_fn=lambda x: scene_albedo(scene, x),
    )
    gt_mesh = TriangleMesh(
        vertices=(extracted.vertices - pose0.translation) @ pose0.rotation,
        triangles=extracted.triangles,
        colors=extracted.colors,
    )
    save_ply(os.path.join(out_dir, "gt_mesh.ply"), gt_mesh)

    with open(os.path.join(out_dir, "bounds.txt"), "w") as f:
        f.write("# world-frame scene bounds: xmin ymin zmin xmax ymax zmax\n")
        f.write(" ".join(f"{v:.6f}" for v in [*bounds.min, *bounds.max]) + "\n")

    return {
        "intrinsics": intr,
        "poses": poses_world,
        "scene": scene,
        "world_from_scene": inv0,
        "bounds": bounds,
        "gt_mesh_path": os.path.join(out_dir, "gt_mesh.ply"),
    }


def read_bounds(path: str) -> SceneBounds:
    vals = []
    for line in open(path):
        line = line.strip()
        if line and not line.startswith("#"):
            vals.extend(float(v) for v in line.split())
    if len(vals) != 6:
        raise ValueError(f"{path}: expected 6 bound values, got {len(vals)}")
    return SceneBounds(min=vals[:3], max=vals[3:])
