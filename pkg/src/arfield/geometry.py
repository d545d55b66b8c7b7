"""Vectors, rigid transforms, pinhole cameras, and ray generation.

Conventions used throughout the package:
  * right-handed world frame, +z is "up" for scene content
  * camera frame is +z forward, +x right, +y down; extrinsics are stored
    world-to-camera
  * all angles are radians internally (degrees only at I/O boundaries)
  * geometry runs in float64
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
ORTHO_TOL = 1e-8


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v))


def normalize(v: np.ndarray) -> np.ndarray:
    """Unit vector along v. Raises on (near-)zero input."""
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("cannot normalize a zero-norm vector")
    return np.asarray(v, dtype=np.float64) / n


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 (improper rotation)")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_direction(self, dirs: np.ndarray) -> np.ndarray:
        """Rotate direction vectors; translation does not apply."""
        d = np.asarray(dirs, dtype=np.float64)
        return d @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        if np.max(np.abs(m[3] - [0, 0, 0, 1])) > 1e-9:
            raise ValueError("bottom row of a rigid transform must be [0,0,0,1]")
        return RigidTransform(m[:3, :3], m[:3, 3])

    def is_identity(self, tol: float = 0.0) -> bool:
        return (np.max(np.abs(self.rotation - np.eye(3))) <= tol
                and np.max(np.abs(self.translation)) <= tol)


def rotation_matrix_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis through the origin."""
    u = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(u)
    if n < 1e-12:
        raise ValueError("rotation axis has zero norm")
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"rotation axis must be unit-norm, got |u| = {n!r}")
    u = u / n
    k = np.array([[0.0, -u[2], u[1]],
                  [u[2], 0.0, -u[0]],
                  [-u[1], u[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_about_axis(axis: np.ndarray, pivot: np.ndarray, angle: float) -> RigidTransform:
    """Rigid rotation by `angle` about the line {pivot + s*axis}.

    Every point on the axis line is a fixed point.
    """
    r = rotation_matrix_about(axis, angle)
    v = np.asarray(pivot, dtype=np.float64)
    return RigidTransform(r, v - r @ v)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus world-to-camera extrinsics.

    Pixel coordinates are continuous with integer values at pixel centers;
    pixel (u, v) covers [u-0.5, u+0.5) x [v-0.5, v+0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.world_to_camera.inverse().translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Perspective-project world points.

        Returns ((..., 2) pixel coords, (...,) camera-frame depth).
        Raises BehindCameraError if any point has non-positive depth.
        """
        p_cam = self.world_to_camera.apply(points)
        z = p_cam[..., 2]
        if np.any(z <= 0):
            raise BehindCameraError("point has non-positive depth in camera frame")
        u = self.fx * p_cam[..., 0] / z + self.cx
        v = self.fy * p_cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def project_valid(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Like project() but flags bad points instead of raising.

        Returns (pixel coords, validity mask); invalid entries hold garbage.
        Valid means positive depth and projection inside the image bounds.
        """
        p_cam = self.world_to_camera.apply(points)
        z = p_cam[..., 2]
        ok = z > 1e-9
        safe_z = np.where(ok, z, 1.0)
        u = self.fx * p_cam[..., 0] / safe_z + self.cx
        v = self.fy * p_cam[..., 1] / safe_z + self.cy
        ok &= (u >= -0.5) & (u <= self.width - 0.5) & (v >= -0.5) & (v <= self.height - 0.5)
        return np.stack([u, v], axis=-1), ok

    def pixel_directions(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        """Unit world-frame viewing directions through the given pixel coords."""
        us = np.asarray(us, dtype=np.float64)
        vs = np.asarray(vs, dtype=np.float64)
        d_cam = np.stack([(us - self.cx) / self.fx,
                          (vs - self.cy) / self.fy,
                          np.ones_like(us)], axis=-1)
        d_world = self.world_to_camera.inverse().apply_direction(d_cam)
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def pixel_to_ray(self, px: tuple[float, float], bounds: tuple[float, float]) -> "Ray":
        u, v = px
        if not (-0.5 <= u <= self.width - 0.5 and -0.5 <= v <= self.height - 0.5):
            raise ValueError(f"pixel ({u}, {v}) outside a {self.width}x{self.height} image")
        d = self.pixel_directions(np.float64(u), np.float64(v))
        return Ray(self.center, d, bounds[0], bounds[1])

    def all_pixel_rays(self, bounds: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
        """Origins (N,3) and directions (N,3) for every pixel center, row-major."""
        vs, us = np.meshgrid(np.arange(self.height, dtype=np.float64),
                             np.arange(self.width, dtype=np.float64), indexing="ij")
        dirs = self.pixel_directions(us.ravel(), vs.ravel())
        origins = np.broadcast_to(self.center, dirs.shape).copy()
        return origins, dirs


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive camera-frame depth."""


@dataclass(frozen=True)
class Ray:
    """r(t) = origin + t * direction with a valid t interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit-norm")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")
        object.__setattr__(self, "origin", _freeze(o))
        object.__setattr__(self, "direction", _freeze(d))

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction if t.ndim else self.origin + t * self.direction


def look_at_camera(eye: np.ndarray, target: np.ndarray, fx: float, fy: float,
                   cx: float, cy: float, width: int, height: int) -> Camera:
    """Camera at `eye` with optical axis toward `target`.

    The image y axis points world-down (-z) as much as possible; when the
    view direction is parallel to world z a fixed fallback roll is used.
    """
    z_cam = normalize(np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64))
    down = vec3(0.0, 0.0, -1.0)
    x_cam = np.cross(down, z_cam)
    if np.linalg.norm(x_cam) < 1e-9:
        x_cam = vec3(1.0, 0.0, 0.0)
    else:
        x_cam = normalize(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    r = np.stack([x_cam, y_cam, z_cam], axis=0)
    extr = RigidTransform(r, -r @ np.asarray(eye, dtype=np.float64))
    return Camera(fx, fy, cx, cy, width, height, extr)
