"""Surface normals of the marker cloud, force decomposition and contact detection.

Sign convention: forces are those exerted by the object on the fingertip and
normals point out of the fingertip, so a pressing contact has a negative
``f . n``.  The *compression* of a marker is ``-f . n`` and is positive in
contact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from vbtactile.errors import DegenerateNeighborhood, DimensionMismatch
from vbtactile.forcesolve import ForceField, SolveKernel

__all__ = [
    "SurfaceNormals",
    "ContactMask",
    "estimate_normals",
    "decompose_force",
    "compression",
    "detect_contact",
    "noise_floor_threshold",
]


@dataclass(frozen=True)
class SurfaceNormals:
    normals: np.ndarray  # (N, 3) unit, outward
    outward: bool = True


@dataclass(frozen=True)
class ContactMask:
    mask: np.ndarray
    threshold: float

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))


def estimate_normals(points, k=9, outward=(0.0, 0.0, 1.0), collinear_tol=1e-10) -> SurfaceNormals:
    """Plane-fit normals from the ``k`` nearest neighbours of every point.

    Parameters
    ----------
    points : array_like, shape (N, 3)
    k : int
        Neighbourhood size including the point itself.
    outward : array_like, shape (3,) or (N, 3)
        Reference directions; each normal is flipped to have a positive dot
        product with its reference.

    Raises
    ------
    DegenerateNeighborhood
        A neighbourhood is (numerically) collinear.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3:
        raise DimensionMismatch("points must have shape (N, 3)")
    if not 3 <= k <= len(P):
        raise ValueError(f"need 3 <= k <= N, got k={k}, N={len(P)}")
    _, idx = cKDTree(P).query(P, k=k)
    nb = P[idx]  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    if np.any(evals[:, 1] <= collinear_tol * np.maximum(evals[:, 2], np.finfo(float).tiny)):
        bad = int(np.flatnonzero(evals[:, 1] <= collinear_tol * evals[:, 2])[0])
        raise DegenerateNeighborhood(f"neighbourhood of point {bad} is collinear")
    normals = evecs[:, :, 0]
    ref = np.broadcast_to(np.asarray(outward, dtype=float), normals.shape)
    flip = np.sum(normals * ref, axis=1) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return SurfaceNormals(normals)


def decompose_force(f, n):
    """Split ``f`` into its component along unit ``n`` and the remainder.

    Returns ``(normal, tangential)`` with ``f == normal * n + tangential``.
    Works row-wise on (..., 3) arrays.
    """
    f = np.asarray(f, dtype=float)
    n = np.asarray(n, dtype=float)
    normal = np.sum(f * n, axis=-1)
    tangential = f - normal[..., None] * n
    return normal, tangential


def compression(forces, normals):
    """Per-marker compression ``-f . n`` (N)."""
    F = forces.vectors if isinstance(forces, ForceField) else np.asarray(forces, dtype=float)
    N = normals.normals if isinstance(normals, SurfaceNormals) else np.asarray(normals, dtype=float)
    return -np.sum(F * N, axis=1)


def detect_contact(forces, normals, threshold: float) -> ContactMask:
    """Markers whose compression reaches ``threshold``."""
    if not threshold > 0:
        raise ValueError("contact threshold must be positive")
    return ContactMask(compression(forces, normals) >= threshold, float(threshold))


def noise_floor_threshold(kernel: SolveKernel, normals, sigma, n_frames=100, factor=5.0, seed=0,
                          minimum=1e-9):
    """Contact threshold scaled from the no-contact compression noise.

    ``n_frames`` displacement fields of pure Gaussian noise (``sigma`` mm) are
    inverted; the threshold is ``factor`` times the RMS compression over all
    markers and frames, never below ``minimum``.
    """
    N = normals.normals if isinstance(normals, SurfaceNormals) else np.asarray(normals, dtype=float)
    if sigma <= 0:
        return float(minimum)
    rng = np.random.default_rng(seed)
    D = rng.normal(0.0, sigma, (kernel.K.shape[1], n_frames))
    F = kernel.K @ D  # (3N, frames)
    n = N.shape[0]
    comp = -(F[:n] * N[:, :1] + F[n:2 * n] * N[:, 1:2] + F[2 * n:] * N[:, 2:3])
    floor = float(np.sqrt(np.mean(comp * comp)))
    return max(factor * floor, float(minimum))
