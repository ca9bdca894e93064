"""Slip detection and the weighted friction-coefficient field."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from vbtactile.errors import FrameMismatch, ZeroNormalForce

__all__ = [
    "FrictionParams",
    "SlipSamples",
    "FrictionCloud",
    "Band",
    "detect_slip",
    "preliminary_mu",
    "collect_slip_samples",
    "smooth_mu",
    "classify_band",
    "classify_bands",
]


@dataclass(frozen=True)
class FrictionParams:
    radius: float = 3.0
    alpha: float = 2.0
    beta: float = 4.0
    slip_threshold: float = 0.1

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("neighbourhood radius must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.slip_threshold > 0:
            raise ValueError("slip threshold must be positive")


@dataclass(frozen=True)
class SlipSamples:
    """Preliminary friction estimates at slip points (global frame)."""

    positions: np.ndarray
    mu: np.ndarray
    frame: np.ndarray
    normal_force: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self):
        return len(self.mu)

    def concat(self, other: "SlipSamples") -> "SlipSamples":
        return SlipSamples(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.frame, other.frame]),
            np.concatenate([self.normal_force, other.normal_force]),
        )


@dataclass(frozen=True)
class FrictionCloud:
    points: np.ndarray
    mu: np.ndarray  # NaN where undefined
    counts: np.ndarray

    @property
    def defined(self):
        return self.counts > 0


def detect_slip(prev_positions, next_positions, prev_contact, next_contact, threshold):
    """Contact markers that moved at least ``threshold`` between two frames.

    Positions must be expressed in the object's (global) frame.
    """
    p0 = np.asarray(prev_positions, dtype=float)
    p1 = np.asarray(next_positions, dtype=float)
    c0 = np.asarray(prev_contact, dtype=bool)
    c1 = np.asarray(next_contact, dtype=bool)
    if not (p0.shape == p1.shape and len(c0) == len(c1) == len(p0)):
        raise FrameMismatch(f"marker counts differ: {len(p0)}, {len(p1)}, {len(c0)}, {len(c1)}")
    moved = np.linalg.norm(p1 - p0, axis=1) >= threshold
    return c0 & c1 & moved


def preliminary_mu(f, n):
    """Tangential-to-normal force ratio.

    ``n`` is the unit normal oriented along the compressive load (into the
    fingertip), so a pressing force has ``f . n > 0``.

    Raises
    ------
    ZeroNormalForce
        ``f . n <= 0``.
    """
    f = np.asarray(f, dtype=float)
    n = np.asarray(n, dtype=float)
    fn = float(f @ n)
    if fn <= 0.0:
        raise ZeroNormalForce(f"normal force {fn:g} N is not compressive")
    return float(np.linalg.norm(f - fn * n) / fn)


def collect_slip_samples(positions, forces, inward_normals, slip_mask, frame) -> SlipSamples:
    """Ratios at every slip marker; markers without compression are dropped."""
    P = np.asarray(positions, dtype=float)[slip_mask]
    F = np.asarray(forces, dtype=float)[slip_mask]
    Nn = np.asarray(inward_normals, dtype=float)[slip_mask]
    fn = np.sum(F * Nn, axis=1)
    keep = fn > 0.0
    P, F, Nn, fn = P[keep], F[keep], Nn[keep], fn[keep]
    mu = np.linalg.norm(F - fn[:, None] * Nn, axis=1) / fn
    return SlipSamples(P, mu, np.full(len(mu), int(frame), dtype=np.int64), fn)


def smooth_mu(surface_points, samples: SlipSamples, params: FrictionParams = FrictionParams()):
    """Weighted friction estimate at every surface point.

    Samples strictly closer than ``params.radius`` contribute with weight
    ``(r - r_i)**alpha * mu_i**beta``.  Points without any such sample get
    ``NaN`` and a zero count.
    """
    P = np.atleast_2d(np.asarray(surface_points, dtype=float))
    mu = np.full(len(P), np.nan)
    counts = np.zeros(len(P), dtype=np.int64)
    if len(samples) == 0 or len(P) == 0:
        return FrictionCloud(P, mu, counts)
    r = params.radius
    tree = cKDTree(samples.positions)
    for i, nbrs in enumerate(tree.query_ball_point(P, r)):
        if not nbrs:
            continue
        nbrs = np.sort(np.asarray(nbrs, dtype=np.int64))
        dist = np.linalg.norm(samples.positions[nbrs] - P[i], axis=1)
        inside = dist < r
        if not np.any(inside):
            continue
        nbrs, dist = nbrs[inside], dist[inside]
        mui = samples.mu[nbrs]
        w = (r - dist) ** params.alpha * mui ** params.beta
        total = w.sum()
        mu[i] = float(w @ mui / total) if total > 0 else float(mui.mean())
        counts[i] = len(nbrs)
    return FrictionCloud(P, mu, counts)


class Band(str, enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"
    UNDEFINED = "undefined"


def classify_band(mu) -> Band:
    """Friction band: high above 0.8, medium in (0.5, 0.8], low at or below 0.5."""
    if mu is None or np.isnan(mu):
        return Band.UNDEFINED
    if mu < 0:
        raise ValueError("friction coefficient must be non-negative")
    if mu > 0.8:
        return Band.HIGH
    if mu > 0.5:
        return Band.MEDIUM
    return Band.LOW


def classify_bands(mu):
    return [classify_band(m) for m in np.asarray(mu, dtype=float)]
