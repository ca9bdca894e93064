"""Symmetric two-mirror light path of the split-view (virtual binocular) camera.

The layout is solved in the cross-section plane ``y = 0`` of an *optics
frame* whose origin is the physical camera centre ``O`` and whose +z axis is
the symmetry axis ``OM`` pointing at the fingertip.  The elastic body fills
``|x| <= l/2, h <= z <= h + d``; the central marker ``M`` sits on the outer
face at ``(0, h + d)``.

Left half (mirrors 1 and 2): the axial ray leaves ``O`` along +z, hits mirror 2
at ``B2`` (on the axis), mirror 1 at ``B1`` and ends on the near-right body
corner ``B0``.  The ray tilted by ``phi/2`` towards -x hits mirror 2 at its
outer end ``A2``, mirror 1 at ``A1`` and ends on the far-left body corner
``A0``.  Those two corners bound the body's silhouette seen from the lower
left, so the half field of view covers the whole body.  Mirror 2 spans exactly
``A2..B2`` and ``A2`` lies on the segment ``B0 B1`` (it just clears the
returning ray).  The virtual camera ``O'`` is ``O`` reflected in mirror 2 and
then mirror 1; the parallax angle ``O' M O''`` is prescribed.

The four unknowns are the left mirror lines (normal angle and offset each).
They are found by a damped Newton iteration seeded from a reduced
construction; the right half follows by symmetry.

Returned 3-D objects live in the *sensor frame*: the optics frame shifted so
the inner face of the elastic body is ``z = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from vbtactile.errors import Infeasible, NoConvergence
from vbtactile.geometry.optics import CameraModel, Plane, reflect_camera

__all__ = [
    "LightPathSpec",
    "LightPathSolution",
    "solve_light_path",
    "light_path_residuals",
    "trace_pixel",
    "physical_camera",
]


@dataclass(frozen=True)
class LightPathSpec:
    h: float = 40.0
    fov_deg: float = 48.0
    l: float = 40.0
    d: float = 8.0
    parallax_deg: float = 90.0
    image_width: int = 1640
    image_height: int = 1232

    def __post_init__(self):
        if not (self.h > 0 and self.l > 0 and self.d > 0):
            raise ValueError("h, l and d must be positive")
        if not 0.0 < self.parallax_deg < 180.0:
            raise ValueError("parallax angle must lie in (0, 180) degrees")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("field of view must lie in (0, 180) degrees")


@dataclass(frozen=True)
class LightPathSolution:
    spec: LightPathSpec
    mirrors: tuple  # Plane x4, sensor frame, order 1..4
    points: dict  # fold points, optics-frame 2-D (x, z)
    camera: CameraModel
    virtual_cameras: tuple  # (left via mirrors 1/2, right via 4/3)
    parallax_deg: float
    residuals: np.ndarray
    iterations: int = 0

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residuals))


# --------------------------------------------------------------------------
# 2-D helpers (optics frame, vectors are (x, z))


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _reflect_dir(v, n):
    return v - 2.0 * (v @ n) * n


def _reflect_pt(p, n, c):
    return p - 2.0 * (p @ n - c) * n


def _hit(origin, direction, n, c):
    """Parameter and point where a ray meets the line ``n.p = c``."""
    denom = direction @ n
    if abs(denom) < 1e-15:
        return math.inf, None
    s = (c - origin @ n) / denom
    return s, origin + s * direction


def _angle_between(u, v):
    return math.atan2(abs(_cross(u, v)), u @ v)


class _Layout:
    """Forward model of the left half for a given mirror parameter vector."""

    def __init__(self, spec: LightPathSpec, q):
        self.spec = spec
        psi1, c1, psi2, c2 = q
        self.n1 = np.array([math.cos(psi1), math.sin(psi1)])
        self.n2 = np.array([math.cos(psi2), math.sin(psi2)])
        self.c1 = c1
        self.c2 = c2
        h, d, l = spec.h, spec.d, spec.l
        self.O = np.zeros(2)
        self.M = np.array([0.0, h + d])
        self.A0 = np.array([-l / 2.0, h + d])
        self.B0 = np.array([l / 2.0, h])
        a = math.radians(spec.fov_deg) / 2.0
        self.vB = np.array([0.0, 1.0])
        self.vA = np.array([-math.sin(a), math.cos(a)])

    def virtual_center(self):
        return _reflect_pt(_reflect_pt(self.O, self.n2, self.c2), self.n1, self.c1)

    def virtual_dir(self, v):
        return _reflect_dir(_reflect_dir(v, self.n2), self.n1)

    def trace(self, v):
        """Physical fold points of the ray leaving O along ``v``."""
        _, p2 = _hit(self.O, v, self.n2, self.c2)
        v2 = _reflect_dir(v, self.n2)
        _, p1 = _hit(p2, v2, self.n1, self.c1)
        v1 = _reflect_dir(v2, self.n1)
        return p2, p1, v1

    def residuals(self):
        spec = self.spec
        scale = spec.h
        Ov = self.virtual_center()
        r = np.empty(4)
        for i, (v, target) in enumerate(((self.vB, self.B0), (self.vA, self.A0))):
            dv = self.virtual_dir(v)
            to = target - Ov
            r[i] = _cross(dv, to) / np.linalg.norm(to)
        A2, _, _ = self.trace(self.vA)
        _, B1, _ = self.trace(self.vB)
        seg = B1 - self.B0
        r[2] = _cross(seg, A2 - self.B0) / np.linalg.norm(seg) / scale
        r[3] = self.parallax() - math.radians(spec.parallax_deg)
        return r

    def parallax(self):
        Ov = self.virtual_center()
        Ov2 = np.array([-Ov[0], Ov[1]])
        return _angle_between(Ov - self.M, Ov2 - self.M)

    def points(self):
        A2, A1, _ = self.trace(self.vA)
        B2, B1, _ = self.trace(self.vB)
        return {
            "O": self.O, "M": self.M, "A0": self.A0, "A1": A1, "A2": A2,
            "B0": self.B0, "B1": B1, "B2": B2, "O_virtual": self.virtual_center(),
        }


def _check_feasible(layout: _Layout):
    spec = layout.spec
    pts = layout.points()
    h, l = spec.h, spec.l
    A2, B2, A1, B1 = pts["A2"], pts["B2"], pts["A1"], pts["B1"]
    problems = []
    if not all(np.all(np.isfinite(p)) for p in (A2, B2, A1, B1)):
        problems.append("rays miss a mirror")
    else:
        if not 0.0 < B2[1] < h:
            problems.append("mirror 2 does not cross the axis between camera and body")
        if not (A2[0] < 0.0 and 0.0 < A2[1] < h):
            problems.append("mirror 2 outer end is misplaced")
        for name, p in (("A1", A1), ("B1", B1)):
            inside_x = abs(p[0]) <= l / 2.0
            if inside_x and p[1] >= h:
                problems.append(f"mirror 1 point {name} lies inside the fingertip")
            if p[0] > 0.0:
                problems.append(f"mirror 1 point {name} is on the wrong side of the axis")
        # each leg must travel forwards
        for v in (layout.vA, layout.vB):
            s2, p2 = _hit(layout.O, v, layout.n2, layout.c2)
            v2 = _reflect_dir(v, layout.n2)
            s1, p1 = _hit(p2, v2, layout.n1, layout.c1)
            if not (s2 > 0 and s1 > 0):
                problems.append("ray reaches a mirror travelling backwards")
        # mirror 1 segment must not cut the body rectangle
        for t in np.linspace(0.0, 1.0, 33):
            p = A1 + t * (B1 - A1)
            if abs(p[0]) < l / 2.0 and h < p[1] < h + spec.d:
                problems.append("mirror 1 intersects the fingertip")
                break
    if problems:
        raise Infeasible("; ".join(sorted(set(problems))))


def _seed(spec: LightPathSpec, n_scan=721):
    """Reduced construction giving an approximate mirror layout.

    The virtual camera is fixed by the parallax and field-of-view conditions
    alone; any pair of mirrors through the fixed point of the resulting
    rotation realises it, and the clearance condition selects one.
    """
    h, d, l = spec.h, spec.d, spec.l
    M = np.array([0.0, h + d])
    A0 = np.array([-l / 2.0, h + d])
    B0 = np.array([l / 2.0, h])
    half_par = math.radians(spec.parallax_deg) / 2.0
    target = math.radians(spec.fov_deg) / 2.0
    u = np.array([-math.sin(half_par), -math.cos(half_par)])

    def subtended(t):
        P = M + t * u
        return _angle_between(A0 - P, B0 - P) - target

    t_hi = 10.0 * (h + d + l)
    t_lo = 1e-3
    if subtended(t_lo) * subtended(t_hi) > 0:
        raise Infeasible("no virtual camera position subtends the required field of view")
    t_star = brentq(subtended, t_lo, t_hi, xtol=1e-14)
    Ov = M + t_star * u
    dB = (B0 - Ov) / np.linalg.norm(B0 - Ov)
    rho = math.atan2(dB[1], dB[0]) - math.pi / 2.0
    Rr = np.array([[math.cos(rho), -math.sin(rho)], [math.sin(rho), math.cos(rho)]])
    C = np.linalg.solve(np.eye(2) - Rr, Ov)

    def q_of(psi):
        # mirror lines through C; direction angles psi and psi + rho/2
        a2, a1 = psi, psi + rho / 2.0
        n2 = np.array([-math.sin(a2), math.cos(a2)])
        n1 = np.array([-math.sin(a1), math.cos(a1)])
        return np.array([math.atan2(n1[1], n1[0]), n1 @ C, math.atan2(n2[1], n2[0]), n2 @ C])

    best = None
    for psi in np.linspace(0.0, math.pi, n_scan, endpoint=False):
        q = q_of(psi)
        lay = _Layout(spec, q)
        with np.errstate(all="ignore"):
            r = lay.residuals()
        if not np.all(np.isfinite(r)):
            continue
        try:
            _check_feasible(lay)
        except Infeasible:
            continue
        if best is None or abs(r[2]) < best[0]:
            best = (abs(r[2]), q)
    if best is None:
        raise Infeasible("no feasible mirror orientation found for these layout parameters")
    return best[1]


def _jacobian(spec, q, step=1e-7):
    J = np.empty((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = step
        J[:, j] = (_Layout(spec, q + e).residuals() - _Layout(spec, q - e).residuals()) / (2 * step)
    return J


def _damped_newton(spec, q0, tol=1e-12, max_iter=50):
    q = np.array(q0, dtype=float)
    r = _Layout(spec, q).residuals()
    for it in range(1, max_iter + 1):
        if np.linalg.norm(r) <= tol:
            return q, r, it - 1
        J = _jacobian(spec, q)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam = 1.0
        norm0 = np.linalg.norm(r)
        while lam > 1e-6:
            q_try = q + lam * step
            with np.errstate(all="ignore"):
                r_try = _Layout(spec, q_try).residuals()
            if np.all(np.isfinite(r_try)) and np.linalg.norm(r_try) < (1 - 1e-4 * lam) * norm0:
                break
            lam *= 0.5
        else:
            raise NoConvergence("line search failed in light-path Newton iteration")
        q, r = q_try, r_try
    if np.linalg.norm(r) <= tol:
        return q, r, max_iter
    raise NoConvergence(f"light-path solve did not converge in {max_iter} iterations")


def physical_camera(spec: LightPathSpec) -> CameraModel:
    """Real camera at ``O`` looking along +z, expressed in the sensor frame."""
    f = (spec.image_width / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    return CameraModel(
        R=np.eye(3),
        t=np.array([0.0, 0.0, spec.h]),
        focal=f,
        principal_point=np.array([spec.image_width / 2.0, spec.image_height / 2.0]),
        fov_deg=spec.fov_deg,
        window=(0.0, float(spec.image_width), 0.0, float(spec.image_height)),
    )


def _plane3(n2d, c, h, mirror_x=False):
    nx, nz = n2d
    if mirror_x:
        nx = -nx
    # optics z = sensor z + h
    return Plane(np.array([nx, 0.0, nz]), c - nz * h)


def solve_light_path(spec: LightPathSpec, tol=1e-12, max_iter=50) -> LightPathSolution:
    """Solve the symmetric mirror layout for ``spec``.

    Raises
    ------
    Infeasible
        No layout satisfies the constraints within physical bounds.
    NoConvergence
        The Newton iteration exhausted its budget.
    """
    q0 = _seed(spec)
    q, r, iters = _damped_newton(spec, q0, tol=tol, max_iter=max_iter)
    layout = _Layout(spec, q)
    _check_feasible(layout)
    h = spec.h
    m1 = _plane3(layout.n1, layout.c1, h)
    m2 = _plane3(layout.n2, layout.c2, h)
    m3 = _plane3(layout.n2, layout.c2, h, mirror_x=True)
    m4 = _plane3(layout.n1, layout.c1, h, mirror_x=True)
    cam = physical_camera(spec)
    ht = float(spec.image_height)
    cx = cam.principal_point[0]
    span = cam.focal * math.tan(math.radians(spec.fov_deg) / 2.0)
    left = reflect_camera(m1, reflect_camera(m2, cam)).with_window((cx - span, cx, 0.0, ht))
    right = reflect_camera(m4, reflect_camera(m3, cam)).with_window((cx, cx + span, 0.0, ht))
    return LightPathSolution(
        spec=spec,
        mirrors=(m1, m2, m3, m4),
        points=layout.points(),
        camera=cam,
        virtual_cameras=(left, right),
        parallax_deg=math.degrees(layout.parallax()),
        residuals=r,
        iterations=iters,
    )


def light_path_residuals(sol: LightPathSolution) -> np.ndarray:
    """Re-check every layout constraint by explicit forward ray tracing.

    Entries: field-of-view split at O, incidence/reflection equality at
    A2, A1, B2, B1, endpoint landing at A0 and B0, clearance of A2 on
    ``B0 B1``, B2 on the axis, parallax error (radians), and the mismatch
    between traced rays and the virtual camera.  Lengths are divided by h.
    """
    spec = sol.spec
    h = spec.h
    pts = sol.points
    to2 = lambda p: np.array([p[0], p[2] + h])  # noqa: E731 - sensor 3-D to optics 2-D
    n1 = sol.mirrors[0].normal[[0, 2]]
    c1 = sol.mirrors[0].offset + sol.mirrors[0].normal[2] * h
    n2 = sol.mirrors[1].normal[[0, 2]]
    c2 = sol.mirrors[1].offset + sol.mirrors[1].normal[2] * h
    O, A0, B0 = pts["O"], pts["A0"], pts["B0"]
    out = []
    a = math.radians(spec.fov_deg) / 2.0
    vA = np.array([-math.sin(a), math.cos(a)])
    vB = np.array([0.0, 1.0])
    legs = {}
    for name, v, end in (("A", vA, A0), ("B", vB, B0)):
        _, p2 = _hit(O, v, n2, c2)
        v2 = _reflect_dir(v, n2)
        _, p1 = _hit(p2, v2, n1, c1)
        v1 = _reflect_dir(v2, n1)
        # incidence == reflection at both folds
        for vin, vout, n in ((v, v2, n2), (v2, v1, n1)):
            out.append(abs(vin @ n) - abs(vout @ n))
            out.append(_cross(vin, n) - _cross(vout, n))
        to_end = end - p1
        out.append(_cross(v1, to_end) / np.linalg.norm(to_end))
        legs[name] = (p2, p1)
    out.append(_angle_between(vA, vB) - a)
    A2 = legs["A"][0]
    B2, B1 = legs["B"]
    seg = B1 - B0
    out.append(_cross(seg, A2 - B0) / np.linalg.norm(seg) / h)
    out.append(B2[0] / h)
    out.append(math.radians(sol.parallax_deg) - math.radians(spec.parallax_deg))
    # traced rays agree with the virtual camera
    left = sol.virtual_cameras[0]
    Ov = to2(left.center)
    for v, end in ((vA, A0), (vB, B0)):
        to_end = end - Ov
        out.append(_cross(_reflect_dir(_reflect_dir(v, n2), n1), to_end) / np.linalg.norm(to_end))
    return np.array(out)


def trace_pixel(sol: LightPathSolution, side: int, px, plane_z: float):
    """Follow a pixel's ray physically through a mirror pair to ``z = plane_z``.

    ``side`` 0 uses mirrors 2 then 1 (left view), 1 uses mirrors 3 then 4.
    Returns the sensor-frame landing point.
    """
    cam = sol.camera
    first, second = (sol.mirrors[1], sol.mirrors[0]) if side == 0 else (sol.mirrors[2], sol.mirrors[3])
    xd = (np.asarray(px, dtype=float) - cam.principal_point) / cam.focal
    v = cam.R.T @ np.array([xd[0], xd[1], 1.0])
    v /= np.linalg.norm(v)
    p = cam.center
    for m in (first, second):
        s = (m.offset - m.normal @ p) / (m.normal @ v)
        if s <= 0:
            raise Infeasible("pixel ray misses its mirror")
        p = p + s * v
        v = v - 2.0 * (v @ m.normal) * m.normal
    s = (plane_z - p[2]) / v[2]
    return p + s * v
