"""Regularised inversion of ``D = H F`` and per-axis force calibration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from vbtactile.elasticity import ConversionMatrix, from_blocks, to_blocks
from vbtactile.errors import DegenerateAxis, DimensionMismatch, IllConditioned

__all__ = [
    "Regularizer",
    "SolveKernel",
    "AxisCalibration",
    "ForceField",
    "SweepResult",
    "build_kernel",
    "solve_forces",
    "sweep_regularizer",
    "calibrate_axes",
    "apply_calibration",
    "resultant",
]

COND_LIMIT = 1e12


@dataclass(frozen=True)
class Regularizer:
    w: float = 0.0

    def __post_init__(self):
        if not self.w >= 0.0:
            raise ValueError("regularisation weight must be non-negative")


@dataclass(frozen=True)
class SolveKernel:
    """Precomputed ``K = (H^T H + w I)^-1 H^T`` (N per mm)."""

    K: np.ndarray
    w: float
    source: str = ""
    condition: float = float("nan")

    @property
    def n_markers(self) -> int:
        return self.K.shape[0] // 3


@dataclass(frozen=True)
class AxisCalibration:
    cx: float = 1.0
    cy: float = 1.0
    cz: float = 1.0

    def __post_init__(self):
        if not (self.cx > 0 and self.cy > 0 and self.cz > 0):
            raise ValueError("calibration multipliers must be positive")

    def as_array(self):
        return np.array([self.cx, self.cy, self.cz])


@dataclass(frozen=True)
class ForceField:
    """Per-marker forces in block layout ``(f_x^1..f_x^N, f_y.., f_z..)``."""

    forces: np.ndarray
    frame: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        f = np.asarray(self.forces, dtype=float)
        if f.ndim != 1 or f.size % 3:
            raise DimensionMismatch("force vector length must be a multiple of 3")
        object.__setattr__(self, "forces", f)

    @classmethod
    def from_vectors(cls, vectors, frame=0, timestamp=0.0):
        return cls(to_blocks(vectors), frame, timestamp)

    @property
    def vectors(self):
        """(N, 3) per-marker force vectors."""
        return from_blocks(self.forces)

    @property
    def n_markers(self) -> int:
        return self.forces.size // 3


def _matrix(H):
    return H.H if isinstance(H, ConversionMatrix) else np.asarray(H, dtype=float)


def _digest(A):
    return hashlib.sha1(np.ascontiguousarray(A).tobytes()).hexdigest()[:16]


def build_kernel(H, reg: Regularizer | float = 0.0) -> SolveKernel:
    """Tikhonov pseudo-inverse of ``H`` through its SVD.

    ``K = V diag(s / (s^2 + w)) U^T`` equals ``(H^T H + w I)^-1 H^T`` without
    forming the squared normal matrix.

    Raises
    ------
    IllConditioned
        ``w == 0`` and the condition number of ``H`` exceeds 1e12.
    """
    w = reg.w if isinstance(reg, Regularizer) else float(Regularizer(reg).w)
    A = _matrix(H)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"H must be square, got {A.shape}")
    U, s, Vt = np.linalg.svd(A)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if w == 0.0 and cond > COND_LIMIT:
        raise IllConditioned(f"condition number {cond:.3e} exceeds {COND_LIMIT:.0e}; regularise")
    gain = s / (s * s + w)
    K = (Vt.T * gain) @ U.T
    return SolveKernel(K, w, _digest(A), cond)


def solve_forces(kernel: SolveKernel, D, frame=0, timestamp=0.0) -> ForceField:
    """``F = K D`` for a block-layout displacement vector (mm)."""
    D = np.asarray(D, dtype=float)
    if D.shape != (kernel.K.shape[1],):
        raise DimensionMismatch(f"displacement length {D.size}, kernel expects {kernel.K.shape[1]}")
    return ForceField(kernel.K @ D, frame, timestamp)


def resultant(F) -> np.ndarray:
    """Per-axis sum of marker forces."""
    f = F.forces if isinstance(F, ForceField) else np.asarray(F, dtype=float)
    return f.reshape(3, -1).sum(axis=1)


@dataclass(frozen=True)
class SweepResult:
    w_best: float
    w_grid: np.ndarray
    errors: np.ndarray
    sigma: float
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def report_lines(self):
        lines = [f"sigma = {self.sigma!r}", f"seed = {self.seed}", f"w_best = {self.w_best!r}"]
        lines += [f"curve {w!r} {e!r}" for w, e in zip(self.w_grid, self.errors)]
        return lines


def sweep_regularizer(H, sigma, trial_forces, w_grid=None, n_noise=8, seed=0) -> SweepResult:
    """Pick the regularisation weight minimising resultant-force error.

    For every trial force ``F0`` and ``n_noise`` noise draws, ``D = H F0 + e``
    with ``e ~ N(0, sigma^2)`` is inverted at each weight in ``w_grid``.  The
    error of one inversion is the largest per-axis resultant deviation divided
    by ``|resultant(F0)|``; the curve is its mean.  Ties (within round-off)
    resolve to the smallest weight.

    Parameters
    ----------
    w_grid : array_like, optional
        Absolute weights.  Defaults to ``s_max^2 * logspace(-14, 0, 57)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    A = _matrix(H)
    trials = np.atleast_2d(np.asarray(trial_forces, dtype=float))
    if trials.shape[0] < 1:
        raise ValueError("need at least one trial force")
    U, s, Vt = np.linalg.svd(A)
    if w_grid is None:
        w_grid = s[0] ** 2 * np.logspace(-14, 0, 57)
    w_grid = np.sort(np.asarray(w_grid, dtype=float))
    rng = np.random.default_rng(seed)
    n = A.shape[0]
    ones = np.zeros((3, n))
    for a in range(3):
        ones[a, a * n // 3:(a + 1) * n // 3] = 1.0
    draws = 1 if sigma == 0 else n_noise
    D = []
    truth = []
    for F0 in trials:
        clean = A @ F0
        for _ in range(draws):
            D.append(clean + (rng.normal(0.0, sigma, n) if sigma > 0 else 0.0))
            truth.append(ones @ F0)
    D = np.array(D).T  # (n, m)
    truth = np.array(truth)  # (m, 3)
    denom = np.linalg.norm(truth, axis=1)
    denom[denom == 0] = 1.0
    UtD = U.T @ D
    # resultant of V c is (ones @ V) c
    RV = ones @ Vt.T
    errors = np.empty(len(w_grid))
    for k, w in enumerate(w_grid):
        R = (RV @ ((s / (s * s + w))[:, None] * UtD)).T
        errors[k] = np.mean(np.max(np.abs(R - truth), axis=1) / denom)
    best = errors.min()
    tie = errors <= best * (1 + 1e-9) + 1e-15
    w_best = float(w_grid[np.argmax(tie)])
    return SweepResult(w_best, w_grid, errors, float(sigma), seed)


def calibrate_axes(measured, truth) -> AxisCalibration:
    """Origin-constrained least-squares scale per axis.

    ``C_a = sum(truth_a * meas_a) / sum(meas_a^2)``.

    Raises
    ------
    DegenerateAxis
        Every measured component on some axis is zero.
    """
    m = np.atleast_2d(np.asarray(measured, dtype=float))
    t = np.atleast_2d(np.asarray(truth, dtype=float))
    if m.shape != t.shape or m.shape[1] != 3:
        raise DimensionMismatch("measured and truth must both have shape (n, 3)")
    if np.any(np.count_nonzero(t, axis=0) < 2):
        raise ValueError("need at least two samples with non-zero truth on every axis")
    den = np.sum(m * m, axis=0)
    if np.any(den == 0):
        axis = "xyz"[int(np.flatnonzero(den == 0)[0])]
        raise DegenerateAxis(f"all measured {axis} components are zero")
    C = np.sum(t * m, axis=0) / den
    return AxisCalibration(*C)


def apply_calibration(F: ForceField, cal: AxisCalibration) -> ForceField:
    """Scale every marker's force components by the axis multipliers."""
    scaled = F.vectors * cal.as_array()
    return ForceField(to_blocks(scaled), F.frame, F.timestamp)
