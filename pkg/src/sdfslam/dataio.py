"""Frame containers, dataset loaders, and trajectory file IO.

On-disk layout for generated datasets:
    intrinsics.txt            fx fy cx cy width height depth_scale
    frames/NNNN.color.png     8-bit color
    frames/NNNN.depth.png     16-bit, meters / depth_scale, 0 = no reading
    trajectory.txt            ground truth, one `ts tx ty tz qx qy qz qw` per line
    gt_mesh.ply               exact surface, present when the generator wrote one

TUM RGB-D sequences (rgb.txt / depth.txt / groundtruth.txt index files)
load through the same Frame type via greedy timestamp association.
"""

import os
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DatasetError, MissingFile, NoAssociations
from .geometry import (
    Intrinsics,
    Pose,
    pixels_to_rays,
    quaternion_to_rotation,
    range_scale,
    rotation_to_quaternion,
)
from .renderer import RayBatch

# maximum rgb/depth timestamp gap accepted during association, seconds
MAX_ASSOC_DT = 0.02


@dataclass
class Frame:
    index: int
    timestamp: float
    color: np.ndarray  # (H, W, 3) float64 in [0, 1], RGB
    depth: np.ndarray  # (H, W) float64 camera z meters, NaN = no sensor return


def frame_rays(frame: Frame, intr: Intrinsics, pose: Pose, uv: np.ndarray) -> RayBatch:
    """Rays through integer pixel coordinates (n, 2) as (u, v) columns.

    Stored z-depth becomes distance along each unit ray so that sample
    depths, rendered depth, and the depth image all live on the same axis.
    """
    uv = np.asarray(uv)
    origins, dirs = pixels_to_rays(intr, pose, uv.astype(np.float64))
    v, u = uv[:, 1].astype(int), uv[:, 0].astype(int)
    return RayBatch(
        origins=origins,
        dirs=dirs,
        gt_color=frame.color[v, u],
        gt_depth=frame.depth[v, u] * range_scale(intr, uv),
    )


def write_intrinsics(path: str, intr: Intrinsics) -> None:
    with open(path, "w") as f:
        f.write(
            f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} "
            f"{intr.width} {intr.height} {intr.depth_scale}\n"
        )


def read_intrinsics(path: str) -> Intrinsics:
    if not os.path.isfile(path):
        raise MissingFile(path)
    parts = open(path).read().split()
    if len(parts) != 7:
        raise DatasetError(f"{path}: expected 7 fields, got {len(parts)}")
    fx, fy, cx, cy = map(float, parts[:4])
    w, h = int(parts[4]), int(parts[5])
    return Intrinsics(
        fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, depth_scale=float(parts[6])
    )


def write_color_png(path: str, color: np.ndarray) -> None:
    bgr = (np.clip(color[..., ::-1], 0.0, 1.0) * 255.0).round().astype(np.uint8)
    cv2.imwrite(path, bgr)


def write_depth_png(path: str, depth_m: np.ndarray, depth_scale: float) -> None:
    counts = np.where(np.isfinite(depth_m), depth_m / depth_scale, 0.0)
    cv2.imwrite(path, np.clip(counts.round(), 0, 65535).astype(np.uint16))


def read_color_png(path: str) -> np.ndarray:
    bgr = cv2.imread(path, cv2.IMREAD_COLOR)
    if bgr is None:
        raise MissingFile(path)
    return bgr[..., ::-1].astype(np.float64) / 255.0


def read_depth_png(path: str, depth_scale: float) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MissingFile(path)
    depth = raw.astype(np.float64) * depth_scale
    depth[raw == 0] = np.nan
    return depth


def save_trajectory(path: str, timestamps, poses) -> None:
    """One `ts tx ty tz qx qy qz qw` line per pose, %.6f throughout."""
    with open(path, "w") as f:
        for ts, pose in zip(timestamps, poses):
            t = pose.translation
            q = rotation_to_quaternion(pose.rotation)
            vals = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
            f.write(" ".join(f"{v:.6f}" for v in vals) + "\n")


def load_trajectory(path: str):
    if not os.path.isfile(path):
        raise MissingFile(path)
    timestamps, poses = [], []
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise DatasetError(f"{path}: trajectory lines need 8 fields")
        timestamps.append(vals[0])
        mat = np.eye(4)
        mat[:3, :3] = quaternion_to_rotation(np.array(vals[4:8]))
        mat[:3, 3] = vals[1:4]
        poses.append(Pose(mat))
    return np.array(timestamps), poses


def load_synthetic(root: str):
    """Read a generated dataset: (intrinsics, frames, gt_poses)."""
    intr = read_intrinsics(os.path.join(root, "intrinsics.txt"))
    ts, gt_poses = load_trajectory(os.path.join(root, "trajectory.txt"))
    frames = []
    for i in range(len(gt_poses)):
        stem = os.path.join(root, "frames", f"{i:04d}")
        color = read_color_png(stem + ".color.png")
        depth = read_depth_png(stem + ".depth.png", intr.depth_scale)
        if color.shape[:2] != (intr.height, intr.width):
            raise DatasetError(f"{stem}: image size does not match intrinsics")
        frames.append(Frame(index=i, timestamp=float(ts[i]), color=color, depth=depth))
    if not frames:
        raise DatasetError(f"{root}: no frames")
    return intr, frames, gt_poses


def _read_tum_index(path: str):
    if not os.path.isfile(path):
        raise MissingFile(path)
    out = []
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        out.append((float(parts[0]), parts[1:]))
    return out


def associate(left_ts, right_ts, max_dt: float = MAX_ASSOC_DT):
    """Greedy nearest-timestamp pairing, each entry used at most once."""
    pairs = []
    cands = sorted(
        (abs(lt - rt), i, j)
        for i, lt in enumerate(left_ts)
        for j, rt in enumerate(right_ts)
        if abs(lt - rt) <= max_dt
    )
    used_l, used_r = set(), set()
    for _, i, j in cands:
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def load_tum(root: str, max_frames: int | None = None, intr: Intrinsics | None = None):
    """TUM RGB-D sequence -> (intrinsics, frames, gt_poses or None).

    Uses the freiburg1 defaults when no intrinsics are given.
    """
    if intr is None:
        intr = Intrinsics(
            fx=517.3, fy=516.5, cx=318.6, cy=255.3, width=640, height=480,
            depth_scale=1.0 / 5000.0,
        )
    rgb = _read_tum_index(os.path.join(root, "rgb.txt"))
    depth = _read_tum_index(os.path.join(root, "depth.txt"))
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth])
    if not pairs:
        raise NoAssociations(f"{root}: no rgb/depth pairs within {MAX_ASSOC_DT}s")
    if max_frames is not None:
        pairs = pairs[:max_frames]

    gt_path = os.path.join(root, "groundtruth.txt")
    gt = None
    if os.path.isfile(gt_path):
        rows = _read_tum_index(gt_path)
        gt_ts = np.array([t for t, _ in rows])
        gt_vals = [list(map(float, v)) for _, v in rows]
        gt = (gt_ts, gt_vals)

    frames, gt_poses = [], []
    for k, (i, j) in enumerate(pairs):
        ts = rgb[i][0]
        color = read_color_png(os.path.join(root, rgb[i][1][0]))
        dep = read_depth_png(os.path.join(root, depth[j][1][0]), intr.depth_scale)
        frames.append(Frame(index=k, timestamp=ts, color=color, depth=dep))
        if gt is not None:
            n = int(np.argmin(np.abs(gt[0] - ts)))
            v = gt[1][n]
            mat = np.eye(4)
            mat[:3, :3] = quaternion_to_rotation(np.array(v[3:7]))
            mat[:3, 3] = v[0:3]
            gt_poses.append(Pose(mat))
    return intr, frames, (gt_poses if gt is not None else None)
