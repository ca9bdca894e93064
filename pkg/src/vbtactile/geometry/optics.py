"""Planar mirrors, pinhole cameras, projection and midpoint triangulation.

All lengths are millimetres.  A camera pose maps sensor-frame points into the
camera frame, ``p_cam = R @ p + t``.  A camera seen through a single mirror
has ``det(R) == -1``; two mirrors restore a proper rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from vbtactile.errors import BehindCamera, ParallelRays

__all__ = [
    "Plane",
    "CameraModel",
    "reflect_point",
    "reflect_camera",
    "project",
    "back_project",
    "triangulate",
    "rotation_about_axis",
]


def _frozen(a, shape=None):
    arr = np.array(a, dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Plane:
    """Oriented plane ``normal . p == offset`` with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", _frozen(n / norm))
        object.__setattr__(self, "offset", float(self.offset) / norm)

    @classmethod
    def through(cls, point, normal) -> "Plane":
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return cls(n, float(n @ np.asarray(point, dtype=float)))

    def signed_distance(self, p):
        return np.asarray(p, dtype=float) @ self.normal - self.offset

    def reflection(self):
        """Affine map ``p -> S @ p + s`` of the mirror."""
        n = self.normal
        S = np.eye(3) - 2.0 * np.outer(n, n)
        return S, 2.0 * self.offset * n


def reflect_point(plane: Plane, p):
    """Mirror image of ``p`` (any leading shape) across ``plane``."""
    p = np.asarray(p, dtype=float)
    dist = p @ plane.normal - plane.offset
    return p - 2.0 * dist[..., None] * plane.normal


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with up to two radial distortion terms.

    Parameters
    ----------
    R, t : array_like
        Pose, sensor frame to camera frame.  ``R`` is orthogonal; its
        determinant is -1 for a camera seen in an odd number of mirrors.
    focal : float
        Focal length in pixels.
    principal_point : array_like
        ``(cx, cy)`` in pixels.
    fov_deg : float
        Full field-of-view angle of the physical camera.
    distortion : array_like
        Radial coefficients ``(k1, k2)``; zeros for an ideal pinhole.
    window : tuple or None
        ``(u_min, u_max, v_min, v_max)`` image region this camera owns.
        Virtual cameras in a split-view rig use half of the physical image.
    """

    R: np.ndarray
    t: np.ndarray
    focal: float
    principal_point: np.ndarray
    fov_deg: float = 48.0
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(2))
    window: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R, (3, 3)))
        object.__setattr__(self, "t", _frozen(self.t, (3,)))
        object.__setattr__(self, "principal_point", _frozen(self.principal_point, (2,)))
        dist = np.zeros(2)
        given = np.asarray(self.distortion, dtype=float).ravel()
        if given.size > 2:
            raise ValueError("at most two radial distortion coefficients are supported")
        dist[: given.size] = given
        object.__setattr__(self, "distortion", _frozen(dist))
        if self.window is not None:
            object.__setattr__(self, "window", tuple(float(w) for w in self.window))
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("field of view must lie in (0, 180) degrees")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthogonal")

    @property
    def center(self):
        """Optical centre in the sensor frame."""
        return -self.R.T @ self.t

    @property
    def optical_axis(self):
        return self.R.T @ np.array([0.0, 0.0, 1.0])

    @property
    def handedness(self) -> int:
        return int(round(np.linalg.det(self.R)))

    def to_camera(self, p):
        return np.asarray(p, dtype=float) @ self.R.T + self.t

    def in_window(self, px):
        px = np.atleast_2d(px)
        if self.window is None:
            return np.ones(len(px), dtype=bool)
        u0, u1, v0, v1 = self.window
        return (px[:, 0] >= u0) & (px[:, 0] <= u1) & (px[:, 1] >= v0) & (px[:, 1] <= v1)

    def with_window(self, window):
        return replace(self, window=window)


def reflect_camera(plane: Plane, cam: CameraModel) -> CameraModel:
    """Camera that sees ``p`` where ``cam`` sees the mirror image of ``p``.

    ``project(reflect_camera(m, c), p) == project(c, reflect_point(m, p))``.
    """
    S, s = plane.reflection()
    return replace(cam, R=cam.R @ S, t=cam.R @ s + cam.t)


def _distort(xn, k):
    r2 = np.sum(xn * xn, axis=-1, keepdims=True)
    return xn * (1.0 + k[0] * r2 + k[1] * r2 * r2)


def _undistort(xd, k, iterations=20):
    if not np.any(k):
        return xd
    xn = xd.copy()
    for _ in range(iterations):
        r2 = np.sum(xn * xn, axis=-1, keepdims=True)
        xn = xd / (1.0 + k[0] * r2 + k[1] * r2 * r2)
    return xn


def project(cam: CameraModel, p):
    """Pixel coordinates of sensor-frame point(s) ``p``.

    Raises
    ------
    BehindCamera
        If any point has non-positive depth.
    """
    pc = cam.to_camera(p)
    z = pc[..., 2]
    if np.any(z <= 0.0):
        raise BehindCamera("point has non-positive depth in camera frame")
    xn = pc[..., :2] / z[..., None]
    return cam.focal * _distort(xn, cam.distortion) + cam.principal_point


def back_project(cam: CameraModel, px):
    """Ray origin and unit direction (sensor frame) through pixel(s) ``px``."""
    px = np.asarray(px, dtype=float)
    xd = (px - cam.principal_point) / cam.focal
    xn = _undistort(xd, cam.distortion)
    dirs_cam = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1)
    dirs = dirs_cam @ cam.R  # R.T applied row-wise
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = np.broadcast_to(cam.center, dirs.shape)
    return origin, dirs


def triangulate(cam1: CameraModel, cam2: CameraModel, px1, px2, parallel_tol=1e-10):
    """Midpoint of the common perpendicular of two back-projected rays.

    Returns
    -------
    point : ndarray, shape (..., 3)
    residual : ndarray, shape (...)
        Length of the common perpendicular (gap between the rays).
    """
    o1, d1 = back_project(cam1, px1)
    o2, d2 = back_project(cam2, px2)
    cross = np.cross(d1, d2)
    sin2 = np.sum(cross * cross, axis=-1)
    if np.any(np.sqrt(sin2) < parallel_tol):
        raise ParallelRays("back-projected rays are parallel")
    w = o1 - o2
    b = np.sum(d1 * d2, axis=-1)
    dw1 = np.sum(d1 * w, axis=-1)
    dw2 = np.sum(d2 * w, axis=-1)
    # unit directions: a = c = 1, denominator = 1 - b^2 = |d1 x d2|^2
    s = (b * dw2 - dw1) / sin2
    u = (dw2 - b * dw1) / sin2
    q1 = o1 + s[..., None] * d1
    q2 = o2 + u[..., None] * d2
    return 0.5 * (q1 + q2), np.linalg.norm(q1 - q2, axis=-1)


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
