"""Pose trajectory text: ``frame timestamp x y z qw qx qy qz`` per line."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from vbtactile.errors import IoFailure, ParseError, VersionMismatch
from vbtactile.mapping import SensorPose

__all__ = ["VERSION", "write_poses", "read_poses"]

VERSION = 1


def write_poses(path, poses, indices=None):
    """Write ``poses`` (sequence of SensorPose); ``indices`` default to 0..n-1."""
    indices = range(len(poses)) if indices is None else indices
    lines = ["# pose trajectory: frame timestamp x y z qw qx qy qz (mm, s)", f"version {VERSION}"]
    for k, p in zip(indices, poses):
        x, y, z, w = Rotation.from_matrix(p.R).as_quat()
        if w < 0:
            x, y, z, w = -x, -y, -z, -w
        vals = [p.timestamp, *p.t, w, x, y, z]
        lines.append(f"{int(k)} " + " ".join(repr(float(v)) for v in vals))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_poses(path):
    """Return ``(indices, poses)``.

    Raises
    ------
    ParseError
        Malformed line or non-unit quaternion.
    VersionMismatch
        Unsupported version line.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    indices, poses = [], []
    version = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if parts[0] == "version":
            version = int(parts[1])
            if version != VERSION:
                raise VersionMismatch(f"pose file version {version}, expected {VERSION}")
            continue
        if len(parts) != 9:
            raise ParseError(f"expected 9 values, got {len(parts)}", line=no)
        try:
            k = int(parts[0])
            ts, x, y, z, qw, qx, qy, qz = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise ParseError(str(exc), line=no) from None
        q = np.array([qx, qy, qz, qw])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ParseError("quaternion is not unit length", line=no, field="q")
        R = Rotation.from_quat(q).as_matrix()
        indices.append(k)
        poses.append(SensorPose(R, np.array([x, y, z]), ts))
    if version is None:
        raise ParseError("missing version line")
    return indices, poses
