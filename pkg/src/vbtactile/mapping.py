"""Global surface cloud assembly, voxel resampling and coloured PLY export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vbtactile.errors import IoFailure, ParseError
from vbtactile.friction import Band, classify_band

__all__ = [
    "SensorPose",
    "GlobalCloud",
    "BAND_COLORS",
    "to_global",
    "accumulate",
    "voxel_resample",
    "export_ply",
    "write_empty_ply",
    "read_ply",
]

BAND_COLORS = {
    Band.HIGH: (220, 40, 40),
    Band.MEDIUM: (40, 200, 40),
    Band.LOW: (40, 80, 220),
    Band.UNDEFINED: (128, 128, 128),
}


@dataclass(frozen=True)
class SensorPose:
    """Rigid transform from the sensor frame to the global frame."""

    R: np.ndarray
    t: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, timestamp=0.0):
        return cls(np.eye(3), np.zeros(3), timestamp)

    def inverse(self) -> "SensorPose":
        return SensorPose(self.R.T, -self.R.T @ self.t, self.timestamp)


def to_global(points, pose: SensorPose):
    """``R p + t`` for each row of ``points``."""
    P = np.asarray(points, dtype=float)
    return P @ pose.R.T + pose.t


@dataclass(frozen=True)
class GlobalCloud:
    points: np.ndarray
    frame_index: np.ndarray
    mu: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.points, dtype=float).reshape(-1, 3)
        idx = np.asarray(self.frame_index, dtype=np.int64).reshape(-1)
        if len(idx) != len(P):
            raise ValueError("one frame index per point required")
        if not np.all(np.isfinite(P)):
            raise ValueError("cloud coordinates must be finite")
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "frame_index", idx)
        if self.mu is not None:
            mu = np.asarray(self.mu, dtype=float).reshape(-1)
            if len(mu) != len(P):
                raise ValueError("one friction value per point required")
            object.__setattr__(self, "mu", mu)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.points)

    def with_mu(self, mu) -> "GlobalCloud":
        return GlobalCloud(self.points, self.frame_index, mu)


def accumulate(cloud: GlobalCloud, frame_points, frame_index: int) -> GlobalCloud:
    """Append one frame's points; an already present frame index is replaced."""
    P = np.asarray(frame_points, dtype=float).reshape(-1, 3)
    keep = cloud.frame_index != frame_index
    mu = None
    if cloud.mu is not None:
        mu = np.concatenate([cloud.mu[keep], np.full(len(P), np.nan)])
    return GlobalCloud(
        np.concatenate([cloud.points[keep], P]),
        np.concatenate([cloud.frame_index[keep], np.full(len(P), frame_index, dtype=np.int64)]),
        mu,
    )


def voxel_resample(cloud: GlobalCloud, edge: float = 0.5) -> GlobalCloud:
    """One centroid per occupied voxel of side ``edge``.

    Output points inherit the smallest member frame index and, when present,
    the mean of the members' defined friction values (NaN if none).  The
    output is sorted by voxel key, so resampling is deterministic.
    """
    if not edge > 0:
        raise ValueError("voxel edge must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / edge).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inv, minlength=m).astype(float)
    cent = np.column_stack([np.bincount(inv, cloud.points[:, a], m) for a in range(3)]) / counts[:, None]
    # keep centroids in their own voxel so a second pass is a no-op
    cent = np.clip(cent, uniq * edge, (uniq + 1) * edge)
    off = np.any(np.floor(cent / edge).astype(np.int64) != uniq, axis=1)
    cent[off] = (uniq[off] + 0.5) * edge
    frame = np.full(m, np.iinfo(np.int64).max)
    np.minimum.at(frame, inv, cloud.frame_index)
    mu = None
    if cloud.mu is not None:
        ok = np.isfinite(cloud.mu)
        n_ok = np.bincount(inv[ok], minlength=m)
        s = np.bincount(inv[ok], cloud.mu[ok], m)
        mu = np.where(n_ok > 0, s / np.maximum(n_ok, 1), np.nan)
    return GlobalCloud(cent, frame, mu)


def _colors(mu, n):
    if mu is None:
        return np.tile(BAND_COLORS[Band.UNDEFINED], (n, 1))
    return np.array([BAND_COLORS[classify_band(m)] for m in mu], dtype=np.int64).reshape(n, 3)


def export_ply(path, cloud: GlobalCloud):
    """ASCII PLY with float x/y/z and uint8 r/g/b from the friction band."""
    if len(cloud) == 0:
        raise ValueError("cannot export an empty cloud")
    rgb = _colors(cloud.mu, len(cloud))
    lines = [
        "ply",
        "format ascii 1.0",
        "comment units mm",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [
        f"{np.float32(p[0])} {np.float32(p[1])} {np.float32(p[2])} {c[0]} {c[1]} {c[2]}"
        for p, c in zip(cloud.points, rgb)
    ]
    text = "\n".join(lines + body) + "\n"
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_empty_ply(path):
    """Header-only PLY, used when a run yields no contact at all."""
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("ply\nformat ascii 1.0\ncomment units mm\nelement vertex 0\n"
                     "property float x\nproperty float y\nproperty float z\n"
                     "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_ply(path):
    """Parse an ASCII PLY written by :func:`export_ply`.

    Returns ``(points float32 -> float64 (n, 3), colors uint8 (n, 3))``.
    """
    try:
        with open(path, encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0] != "ply":
        raise ParseError("missing ply magic", line=1)
    try:
        end = lines.index("end_header")
    except ValueError:
        raise ParseError("missing end_header") from None
    n = None
    props = []
    for line in lines[1:end]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
    if n is None or props != ["x", "y", "z", "red", "green", "blue"]:
        raise ParseError("unexpected PLY layout", line=end + 1)
    body = lines[end + 1:end + 1 + n]
    if len(body) != n:
        raise ParseError(f"expected {n} vertices, found {len(body)}", line=len(lines))
    pts = np.zeros((n, 3))
    rgb = np.zeros((n, 3), dtype=np.uint8)
    for k, line in enumerate(body):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError("vertex needs 6 values", line=end + 2 + k)
        pts[k] = [np.float32(v) for v in parts[:3]]
        rgb[k] = [int(v) for v in parts[3:]]
    return pts, rgb
