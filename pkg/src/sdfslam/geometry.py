"""SE(3) poses, twist exp/log maps, and pinhole ray generation.

Conventions used throughout the package:
  * poses are camera-to-world rigid transforms stored as 4x4 float64 arrays;
  * twists are 6-vectors (v, w) with the translation part first;
  * the camera looks along +z with +x right and +y down, so pixel (cx, cy)
    maps to the direction (0, 0, 1) under the identity pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonRigidInput, PixelOutOfBounds

# Below this rotation magnitude the closed-form Rodrigues coefficients lose
# precision to cancellation, so second-order Taylor expansions take over.
SMALL_ANGLE = 1e-8

# Maximum deviation of R^T R from the identity before a matrix is rejected
# as non-rigid.
ORTHONORMALITY_TOL = 1e-6


def skew(w: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def exp_map(xi: np.ndarray) -> np.ndarray:
    """Exponential map from a twist (v, w) to a 4x4 rigid transform."""
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    wx = skew(w)
    wx2 = wx @ wx
    if theta < SMALL_ANGLE:
        rot = np.eye(3) + wx + 0.5 * wx2
        vmat = np.eye(3) + 0.5 * wx + wx2 / 6.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
        rot = np.eye(3) + a * wx + b * wx2
        vmat = np.eye(3) + b * wx + c * wx2
    out = np.eye(4)
    out[:3, :3] = rot
    out[:3, 3] = vmat @ v
    return out


def _check_rigid(t: np.ndarray) -> None:
    if t.shape != (4, 4):
        raise NonRigidInput(f"expected 4x4 transform, got shape {t.shape}")
    rot = t[:3, :3]
    err = np.max(np.abs(rot.T @ rot - np.eye(3)))
    if err > ORTHONORMALITY_TOL:
        raise NonRigidInput(f"rotation block off orthonormal by {err:.3g}")
    if np.linalg.det(rot) < 0.0:
        raise NonRigidInput("rotation block has negative determinant")
    if np.max(np.abs(t[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > ORTHONORMALITY_TOL:
        raise NonRigidInput("bottom row is not (0, 0, 0, 1)")


def log_map(t: np.ndarray) -> np.ndarray:
    """Logarithm map from a 4x4 rigid transform to a twist (v, w).

    The rotation angle must be strictly below pi; the returned twist uses the
    translation-first layout matching exp_map.
    """
    t = np.asarray(t, dtype=np.float64)
    _check_rigid(t)
    rot = t[:3, :3]
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    if theta < SMALL_ANGLE:
        w = vee
        wx = skew(w)
        vinv = np.eye(3) - 0.5 * wx + (wx @ wx) / 12.0
    else:
        w = theta / np.sin(theta) * vee
        wx = skew(w)
        coeff = (1.0 / theta**2) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
        vinv = np.eye(3) - 0.5 * wx + coeff * (wx @ wx)
    v = vinv @ t[:3, 3]
    return np.hstack([v, w])


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two 4x4 rigid transforms."""
    return a @ b


def inverse(t: np.ndarray) -> np.ndarray:
    """Inverse of a 4x4 rigid transform via the rotation transpose."""
    rot = t[:3, :3]
    out = np.eye(4)
    out[:3, :3] = rot.T
    out[:3, 3] = -rot.T @ t[:3, 3]
    return out


def rotation_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) of a rotation matrix."""
    m = rot
    tr = np.trace(m)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (m[2, 1] - m[1, 2]) / s
        qy = (m[0, 2] - m[2, 0]) / s
        qz = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        qw = (m[2, 1] - m[1, 2]) / s
        qx = 0.25 * s
        qy = (m[0, 1] + m[1, 0]) / s
        qz = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        qw = (m[0, 2] - m[2, 0]) / s
        qx = (m[0, 1] + m[1, 0]) / s
        qy = 0.25 * s
        qz = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        qw = (m[1, 0] - m[0, 1]) / s
        qx = (m[0, 2] + m[2, 0]) / s
        qy = (m[1, 2] + m[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (qx, qy, qz, qw); normalizes first."""
    qx, qy, qz, qw = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (qy**2 + qz**2), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx**2 + qz**2), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx**2 + qy**2)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(4))

    @staticmethod
    def from_twist(xi: np.ndarray) -> "Pose":
        return Pose(exp_map(xi))

    @staticmethod
    def from_matrix(t: np.ndarray, validate: bool = True) -> "Pose":
        t = np.asarray(t, dtype=np.float64)
        if validate:
            _check_rigid(t)
        return Pose(t)

    def twist(self) -> np.ndarray:
        return log_map(self.matrix)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.matrix @ other.matrix)

    def inverse(self) -> "Pose":
        return Pose(inverse(self.matrix))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def quaternion(self) -> np.ndarray:
        return rotation_to_quaternion(self.matrix[:3, :3])

    def copy(self) -> "Pose":
        return Pose(self.matrix.copy())


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model plus raw-depth-to-meters scale."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0 / 5000.0

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.depth_scale <= 0.0:
            raise ValueError("depth_scale must be positive")


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction and optional supervision."""

    origin: np.ndarray
    direction: np.ndarray
    gt_color: np.ndarray | None = None
    gt_depth: float | None = None


def _check_pixels(intr: Intrinsics, u: np.ndarray, v: np.ndarray) -> None:
    if np.any(u < 0.0) or np.any(u >= intr.width) or np.any(v < 0.0) or np.any(v >= intr.height):
        raise PixelOutOfBounds(
            f"pixel outside {intr.width}x{intr.height} image rectangle"
        )


def pixel_to_ray(intr: Intrinsics, pose: Pose, u: float, v: float) -> Ray:
    """World ray through pixel (u, v) under a camera-to-world pose."""
    _check_pixels(intr, np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_cam /= np.linalg.norm(d_cam)
    return Ray(origin=pose.translation.copy(), direction=pose.rotation @ d_cam)


def range_scale(intr: Intrinsics, uv: np.ndarray) -> np.ndarray:
    """Factor turning sensor z-depth into distance along the unit pixel ray."""
    uv = np.asarray(uv, dtype=np.float64)
    xn = (uv[:, 0] - intr.cx) / intr.fx
    yn = (uv[:, 1] - intr.cy) / intr.fy
    return np.sqrt(1.0 + xn * xn + yn * yn)


def pixels_to_rays(
    intr: Intrinsics, pose: Pose, uv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batched pixel_to_ray: (N, 2) pixels -> origins (N, 3), unit dirs (N, 3)."""
    uv = np.asarray(uv, dtype=np.float64)
    _check_pixels(intr, uv[:, 0], uv[:, 1])
    d_cam = np.stack(
        [
            (uv[:, 0] - intr.cx) / intr.fx,
            (uv[:, 1] - intr.cy) / intr.fy,
            np.ones(len(uv)),
        ],
        axis=1,
    )
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs
