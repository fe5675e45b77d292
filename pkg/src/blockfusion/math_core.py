"""Camera geometry and rigid transforms shared by every engine.

Images are plain numpy arrays in row-major (height, width[, channels]) order;
pixel (0, 0) is the top-left corner.  Depths and translations are in metres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar factor) with determinant +1."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(omega) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``omega``."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    if theta < 1e-8:
        # second order series is exact to machine precision here
        return np.eye(3) + k + 0.5 * (k @ k)
    return (np.eye(3) + (np.sin(theta) / theta) * k
            + ((1.0 - np.cos(theta)) / theta ** 2) * (k @ k))


def rotation_angle(rotation: np.ndarray) -> float:
    """Angle in radians of a rotation matrix (robust near 0 and pi)."""
    r = np.asarray(rotation)
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(s, c))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t``.

    Tracking states hold world-to-camera poses; trackers internally work with
    the inverse (camera-to-world).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def centre(self) -> np.ndarray:
        """Camera centre in world coordinates, for a world-to-camera pose."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def is_orthonormal(self, tol: float = 1e-5) -> bool:
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        return bool(err <= tol and np.linalg.det(self.rotation) > 0)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, atol=atol)
                    and np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self) -> str:
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``.

    ``up`` is the world up direction; camera axes follow the image
    convention (x right, y down, z forward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return Pose(r, -r @ eye)


def pose_increment(pose: Pose, twist) -> Pose:
    """Left-multiply ``pose`` by the small motion encoded in ``twist``.

    ``twist[:3]`` is an axis-angle rotation, ``twist[3:]`` a translation.
    """
    twist = np.asarray(twist, dtype=np.float64)
    d_rot = rodrigues(twist[:3])
    rotation = orthonormalize(d_rot @ pose.rotation)
    translation = d_rot @ pose.translation + twist[3:]
    return Pose(rotation, translation)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    def downsampled(self, level: int) -> "Intrinsics":
        """Intrinsics of pyramid ``level`` built by repeated 2x2 reduction."""
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        w, h = self.width, self.height
        for _ in range(level):
            fx, fy = fx / 2.0, fy / 2.0
            cx, cy = (cx + 0.5) / 2.0 - 0.5, (cy + 0.5) / 2.0 - 0.5
            w, h = (w + 1) // 2, (h + 1) // 2
        return Intrinsics(fx, fy, cx, cy, w, h)


def project(intr: Intrinsics, p_cam) -> np.ndarray:
    """Pixel coordinates of camera-frame point(s); requires z > 0."""
    p = np.asarray(p_cam, dtype=np.float64)
    x = intr.fx * p[..., 0] / p[..., 2] + intr.cx
    y = intr.fy * p[..., 1] / p[..., 2] + intr.cy
    return np.stack([x, y], axis=-1)


def unproject(intr: Intrinsics, pixel, depth) -> np.ndarray:
    """Camera-frame point at z-depth ``depth`` seen through ``pixel``."""
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    x = (px[..., 0] - intr.cx) / intr.fx * d
    y = (px[..., 1] - intr.cy) / intr.fy * d
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(height, width, 2) array of integer pixel coordinates (x, y)."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def depth_to_points(intr: Intrinsics, depth: np.ndarray) -> np.ndarray:
    """Back-project a depth image to an (h, w, 3) camera-frame point map.

    Invalid depths (<= 0) produce points with z <= 0 and must be masked.
    """
    return unproject(intr, pixel_grid(depth.shape[1], depth.shape[0]), depth)
