"""Refraction through the flat glass/silicone stack and its polynomial correction.

Geometry: air for ``z < -glass_thickness``, glass up to ``z = 0`` and silicone
above (sensor frame).  Cameras sit in air; markers sit in the silicone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from vbtactile.errors import RankDeficient
from vbtactile.geometry.optics import CameraModel, project

__all__ = [
    "LayerStack",
    "refracted_direction",
    "project_refracted",
    "CompensationPoly",
    "Compensated",
    "fit_refraction_compensation",
    "apply_compensation",
]


@dataclass(frozen=True)
class LayerStack:
    glass_thickness: float = 2.0
    n_glass: float = 1.5
    n_silicone: float = 1.41
    n_air: float = 1.0


def refracted_direction(stack: LayerStack, origin, target):
    """Unit direction of the air leg of the refracted path ``origin -> target``.

    The path obeys Snell's law at ``z = -glass_thickness`` and ``z = 0``;
    ``origin`` must be in air and ``target`` in silicone.
    """
    o = np.asarray(origin, dtype=float)
    p = np.asarray(target, dtype=float)
    tg = stack.glass_thickness
    if not (o[2] < -tg and p[2] > 0.0):
        raise ValueError("origin must lie in air below the glass and target inside the silicone")
    horiz = p[:2] - o[:2]
    rho = float(np.hypot(*horiz))
    if rho == 0.0:
        return np.array([0.0, 0.0, 1.0])
    u = horiz / rho
    legs = ((-tg - o[2], stack.n_air), (tg, stack.n_glass), (p[2], stack.n_silicone))
    n_min = min(n for _, n in legs)

    # invariant k = n * sin(theta) is shared by every leg
    def reach(k):
        return sum(t * k / np.sqrt(n * n - k * k) for t, n in legs) - rho

    k = brentq(reach, 0.0, n_min * (1.0 - 1e-15), xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)
    s = k / stack.n_air
    return np.array([s * u[0], s * u[1], np.sqrt(1.0 - s * s)])


def project_refracted(cam: CameraModel, stack: LayerStack, points):
    """Pixels of ``points`` seen through the layer stack by ``cam``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    c = cam.center
    apparent = np.empty_like(pts)
    for i, p in enumerate(pts):
        apparent[i] = c + refracted_direction(stack, c, p)
    return project(cam, apparent)


def _exponents(degree):
    return [e for e in itertools.product(range(degree + 1), repeat=3) if sum(e) <= degree]


class Compensated(NamedTuple):
    position: np.ndarray
    extrapolated: np.ndarray


@dataclass(frozen=True)
class CompensationPoly:
    """Per-axis polynomial deviation model ``observed - true = P(observed)``."""

    degree: int
    exponents: tuple
    coef: np.ndarray  # (n_terms, 3)
    center: np.ndarray
    scale: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    rmse: float

    @classmethod
    def zero(cls, degree=3):
        ex = tuple(_exponents(degree))
        return cls(degree, ex, np.zeros((len(ex), 3)), np.zeros(3), np.ones(3),
                   np.full(3, -np.inf), np.full(3, np.inf), 0.0)

    def features(self, observed):
        x = (np.atleast_2d(observed) - self.center) / self.scale
        return np.stack([np.prod(x ** np.array(e), axis=1) for e in self.exponents], axis=1)

    def deviation(self, observed):
        return self.features(observed) @ self.coef


def fit_refraction_compensation(observed, true, degree=3) -> CompensationPoly:
    """Least-squares fit of the deviation ``observed - true`` per output axis.

    Parameters
    ----------
    observed, true : array_like, shape (n, 3)
        Triangulated (deviated) and actual marker positions.
    degree : int
        Total polynomial degree in the three observed coordinates.

    Raises
    ------
    RankDeficient
        Too few samples, or samples too poorly spread to fix every coefficient.
    """
    obs = np.atleast_2d(np.asarray(observed, dtype=float))
    tru = np.atleast_2d(np.asarray(true, dtype=float))
    if obs.shape != tru.shape or obs.shape[1] != 3:
        raise ValueError("observed and true must both have shape (n, 3)")
    ex = tuple(_exponents(degree))
    if len(obs) < len(ex):
        raise RankDeficient(f"{len(obs)} samples cannot fix {len(ex)} coefficients")
    lo, hi = obs.min(axis=0), obs.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = np.where(hi > lo, 0.5 * (hi - lo), 1.0)
    proto = CompensationPoly(degree, ex, np.zeros((len(ex), 3)), center, scale, lo, hi, 0.0)
    A = proto.features(obs)
    dev = obs - tru
    coef, _, rank, sv = np.linalg.lstsq(A, dev, rcond=None)
    if rank < len(ex) or sv[-1] < 1e-10 * sv[0]:
        raise RankDeficient("sample spread does not determine the polynomial")
    resid = A @ coef - dev
    rmse = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return CompensationPoly(degree, ex, coef, center, scale, lo, hi, rmse)


def apply_compensation(poly: CompensationPoly, observed) -> Compensated:
    """Subtract the predicted deviation; flag points outside the fitted box."""
    obs = np.asarray(observed, dtype=float)
    flat = np.atleast_2d(obs)
    corrected = flat - poly.deviation(flat)
    outside = np.any((flat < poly.lower) | (flat > poly.upper), axis=1)
    if obs.ndim == 1:
        return Compensated(corrected[0], np.bool_(outside[0]))
    return Compensated(corrected, outside)
