"""Synthetic ground truth: parametric objects, penalty contact and marker rendering.

Conventions
-----------
Objects live in the global frame; their signed distance is positive outside.
A :class:`~vbtactile.mapping.SensorPose` maps sensor coordinates to global
ones, and an indentation ``depth`` moves the sensor along its own +z axis
(the direction its surface faces).  Forces are those the object exerts on
the fingertip, expressed in the sensor frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from vbtactile.elasticity import ConversionMatrix, FingertipGeometry, from_blocks, to_blocks
from vbtactile.errors import ContactLost, NoConvergence, OutOfFrustum
from vbtactile.geometry.lightpath import LightPathSolution
from vbtactile.geometry.optics import project
from vbtactile.geometry.refraction import LayerStack, project_refracted
from vbtactile.mapping import SensorPose

__all__ = [
    "PlaneShape",
    "SphereShape",
    "BoxShape",
    "CapsuleShape",
    "UnionShape",
    "FrictionField",
    "SyntheticObject",
    "Scenario",
    "GroundTruthFrame",
    "pose_from",
    "simulate_press",
    "simulate_pin_array",
    "simulate_slide",
    "add_noise",
    "render_markers",
    "load_scenario",
    "scenario_from_dict",
    "facing_down_pose",
    "contact_stiffness",
    "pin_array",
    "FLIP_WXYZ",
]


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# -- shapes -----------------------------------------------------------------

@dataclass(frozen=True)
class PlaneShape:
    """Solid half-space ``normal . (x - point) <= 0``."""

    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def sdf(self, x):
        return (np.asarray(x, dtype=float) - self.point) @ _unit(self.normal)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(_unit(self.normal), x.shape).copy()


@dataclass(frozen=True)
class SphereShape:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 10.0

    def sdf(self, x):
        return np.linalg.norm(np.asarray(x, dtype=float) - self.center, axis=-1) - self.radius

    def gradient(self, x):
        d = np.asarray(x, dtype=float) - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(n > 0, d / np.where(n > 0, n, 1.0), np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class BoxShape:
    """Axis-aligned box."""

    center: tuple = (0.0, 0.0, 0.0)
    half: tuple = (5.0, 5.0, 5.0)

    def sdf(self, x):
        q = np.abs(np.asarray(x, dtype=float) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def gradient(self, x):
        d = np.asarray(x, dtype=float) - self.center
        q = np.abs(d) - self.half
        s = np.where(d < 0, -1.0, 1.0)
        pos = np.maximum(q, 0.0)
        n_out = np.linalg.norm(pos, axis=-1, keepdims=True)
        g_out = s * pos / np.where(n_out > 0, n_out, 1.0)
        face = np.argmax(q, axis=-1)
        g_in = np.zeros_like(d)
        np.put_along_axis(g_in, face[..., None], np.take_along_axis(s, face[..., None], -1), -1)
        return np.where(n_out > 0, g_out, g_in)


@dataclass(frozen=True)
class CapsuleShape:
    a: tuple = (0.0, 0.0, 0.0)
    b: tuple = (0.0, 0.0, 10.0)
    radius: float = 1.0

    def _closest(self, x):
        a = np.asarray(self.a, dtype=float)
        ab = np.asarray(self.b, dtype=float) - a
        t = np.clip(((np.asarray(x, dtype=float) - a) @ ab) / (ab @ ab), 0.0, 1.0)
        return a + t[..., None] * ab

    def sdf(self, x):
        return np.linalg.norm(np.asarray(x, dtype=float) - self._closest(x), axis=-1) - self.radius

    def gradient(self, x):
        d = np.asarray(x, dtype=float) - self._closest(x)
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(n > 0, d / np.where(n > 0, n, 1.0), np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class UnionShape:
    """Union of parts; ``blend > 0`` rounds the creases over about ``blend`` mm.

    The blended distance is ``-blend * log(sum(exp(-d_i / blend)))``, whose
    gradient is a convex combination of the part gradients, so it stays
    1-Lipschitz and varies continuously across creases.
    """

    parts: tuple = ()
    blend: float = 0.0

    def _weights(self, vals):
        shifted = np.exp(-(vals - vals.min(axis=0)) / self.blend)
        return shifted / shifted.sum(axis=0)

    def sdf(self, x):
        vals = np.array([p.sdf(x) for p in self.parts])
        if self.blend <= 0:
            return vals.min(axis=0)
        lo = vals.min(axis=0)
        return lo - self.blend * np.log(np.exp(-(vals - lo) / self.blend).sum(axis=0))

    def gradient(self, x):
        vals = np.array([p.sdf(x) for p in self.parts])
        grads = np.array([p.gradient(x) for p in self.parts])
        if self.blend <= 0:
            k = np.argmin(vals, axis=0)
            return np.take_along_axis(grads, k[None, ..., None], 0)[0]
        g = np.einsum("p...,p...i->...i", self._weights(vals), grads)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        return np.where(norm > 1e-12, g / np.where(norm > 1e-12, norm, 1.0), grads[0])


# -- friction fields --------------------------------------------------------

@dataclass(frozen=True)
class FrictionField:
    """Piecewise-constant friction over the object surface.

    ``kind`` is ``"uniform"`` (``values[0]``), ``"halfspace"`` (``values[0]``
    where ``normal . (x - point) < 0``, else ``values[1]``) or ``"sector"``
    (angle of ``x - point`` about ``normal`` measured from ``reference``;
    ``values[k]`` for ``edges[k] <= angle < edges[k + 1]``, edges in degrees
    covering [0, 360)).
    """

    kind: str = "uniform"
    values: tuple = (0.5,)
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (1.0, 0.0, 0.0)
    reference: tuple = (1.0, 0.0, 0.0)
    edges: tuple = ()

    def __post_init__(self):
        if any(v < 0 for v in self.values):
            raise ValueError("friction coefficients must be non-negative")
        need = {"uniform": 1, "halfspace": 2}.get(self.kind)
        if self.kind == "sector":
            if len(self.edges) != len(self.values) + 1:
                raise ValueError("sector field needs one more edge than values")
        elif need is None:
            raise ValueError(f"unknown friction field kind {self.kind!r}")
        elif len(self.values) != need:
            raise ValueError(f"{self.kind} field needs {need} value(s)")

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if self.kind == "uniform":
            return np.full(len(x), v[0])
        d = x - self.point
        if self.kind == "halfspace":
            return np.where(d @ _unit(self.normal) < 0, v[0], v[1])
        n = _unit(self.normal)
        e1 = _unit(np.asarray(self.reference) - (np.asarray(self.reference) @ n) * n)
        e2 = np.cross(n, e1)
        ang = np.degrees(np.arctan2(d @ e2, d @ e1)) % 360.0
        k = np.clip(np.searchsorted(np.asarray(self.edges), ang, side="right") - 1, 0, len(v) - 1)
        return v[k]

    def boundary_distance(self, x):
        """Distance to the nearest material boundary (half-space fields only)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "uniform":
            return np.full(len(x), np.inf)
        if self.kind == "halfspace":
            return np.abs((x - self.point) @ _unit(self.normal))
        raise NotImplementedError("boundary distance is only defined for half-space fields")


@dataclass(frozen=True)
class SyntheticObject:
    shape: object
    friction: FrictionField = FrictionField()


# -- frames -----------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthFrame:
    """One simulated frame, all vectors in the sensor frame unless noted.

    ``mu`` is NaN at markers outside contact.  ``object_normals`` are unit
    object normals (pointing away from the object, into the fingertip).
    """

    index: int
    timestamp: float
    rest: np.ndarray
    displacements: np.ndarray
    forces: np.ndarray
    contact: np.ndarray
    slip: np.ndarray
    mu: np.ndarray
    normal_force: np.ndarray
    object_normals: np.ndarray
    pose: SensorPose
    iterations: int = 0
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def positions(self):
        return self.rest + self.displacements

    @property
    def global_positions(self):
        return self.positions @ self.pose.R.T + self.pose.t

    @property
    def force_vector(self):
        """Block-layout forces."""
        return to_blocks(self.forces)

    @property
    def displacement_vector(self):
        return to_blocks(self.displacements)

    def tangential(self):
        fn = np.sum(self.forces * self.object_normals, axis=1)
        return self.forces - fn[:, None] * self.object_normals


def pose_from(translation=(0.0, 0.0, 0.0), quaternion_wxyz=(1.0, 0.0, 0.0, 0.0), timestamp=0.0):
    w, x, y, z = quaternion_wxyz
    R = Rotation.from_quat([x, y, z, w]).as_matrix()
    return SensorPose(R, np.asarray(translation, dtype=float), timestamp)


def _indented(pose: SensorPose, depth):
    return replace(pose, t=pose.t + depth * pose.R[:, 2])


def _geometry(H: ConversionMatrix) -> FingertipGeometry:
    if H.geometry is None:
        raise ValueError("conversion matrix carries no fingertip geometry")
    return H.geometry


def contact_stiffness(H: ConversionMatrix, factor=1.0):
    """Penalty stiffness ``factor / mean(diag H_zz)`` (N/mm)."""
    n = H.n_markers
    return factor / float(np.mean(np.diag(H.H)[2 * n:]))


def _solve_contact(H, rest, obj, pose, tangent_dirs, tangent_scale, k_c, tol=1e-8, max_iter=100):
    """Active-set penalty contact with forces ``lambda_i (m_i + c_i t_i)``.

    ``tangent_dirs`` (global, unit or zero) and ``tangent_scale`` are either
    arrays or callables of the current global positions (so friction can be
    looked up where the marker actually is).
    """
    n = len(rest)
    R, t = pose.R, pose.t
    Hm = H.H
    u = np.zeros((n, 3))
    lam = np.zeros(n)
    relax, last = 1.0, np.inf
    for it in range(1, max_iter + 1):
        x = (rest + u) @ R.T + t
        phi = obj.shape.sdf(x)
        m = obj.shape.gradient(x) @ R  # object normal in sensor frame
        tg = tangent_dirs(x) if callable(tangent_dirs) else tangent_dirs
        cs = tangent_scale(x) if callable(tangent_scale) else tangent_scale
        tdir = tg @ R
        tdir = tdir - np.sum(tdir * m, axis=1)[:, None] * m
        tn = np.linalg.norm(tdir, axis=1)
        tdir = np.where(tn[:, None] > 1e-12, tdir / np.where(tn > 1e-12, tn, 1.0)[:, None], 0.0)
        e = m + cs[:, None] * tdir
        # gap_i(lambda) = c_i - sum_j m_i^T H_ij e_j lambda_j
        c = -phi + np.sum(m * u, axis=1)
        HE = Hm[:, :n] * e[:, 0] + Hm[:, n:2 * n] * e[:, 1] + Hm[:, 2 * n:] * e[:, 2]
        G = sum(m[:, a][:, None] * HE[a * n:(a + 1) * n] for a in range(3))
        active = c > 0
        for _ in range(4 * n + 10):
            lam = np.zeros(n)
            if np.any(active):
                A = np.flatnonzero(active)
                lam[A] = np.linalg.solve(np.eye(len(A)) / k_c + G[np.ix_(A, A)], c[A])
            gap = c - G @ lam
            new = (lam > 0) | (~active & (gap > 0))
            new &= ~(active & (lam <= 0))
            if np.array_equal(new, active):
                break
            active = new
        else:
            raise NoConvergence("contact active set cycles")
        F = lam[:, None] * e
        u_new = from_blocks(Hm @ to_blocks(F))
        step = np.abs(u_new - u).max()
        if step < tol:
            return u_new, F, lam, m, cs, it
        # damp when the normals flip between neighbouring features
        if step >= last:
            relax = max(0.5 * relax, 1.0 / 64.0)
        last = step
        u = u + relax * (u_new - u)
    raise NoConvergence(f"penalty contact did not settle within {max_iter} iterations ({step:.2e} mm)")


def simulate_press(H: ConversionMatrix, obj: SyntheticObject, pose: SensorPose, depth: float,
                   stiffness_factor=1.0, index=0, tol=1e-8, max_iter=100) -> GroundTruthFrame:
    """Frictionless press of the fingertip ``depth`` mm into ``obj``.

    Raises
    ------
    NoConvergence
        The force/displacement fixed point is not reached.
    """
    if depth < 0:
        raise ValueError("indentation depth must be non-negative")
    geom = _geometry(H)
    rest = geom.marker_positions()
    n = len(rest)
    p = _indented(pose, depth)
    k_c = contact_stiffness(H, stiffness_factor)
    u, F, lam, m, _, it = _solve_contact(H, rest, obj, p, np.zeros((n, 3)), np.zeros(n), k_c, tol, max_iter)
    contact = lam > 0
    mu = np.where(contact, obj.friction(rest @ p.R.T + p.t), np.nan)
    return GroundTruthFrame(index, pose.timestamp, rest, u, F, contact, np.zeros(n, dtype=bool), mu,
                            lam, m, p, it, {"depth": depth, "k_c": k_c})


def pin_array(geom: FingertipGeometry, spacing, rows=3, cols=3, pin_radius=1.0, center=(0.0, 0.0),
              length=30.0, blend=0.02):
    """Union of vertical capsule pins whose tips rest on the undeformed surface.

    Overlapping pins meet in a crease where the contact normal would flip;
    ``blend`` (mm) rounds it so the contact solve has a fixed point.
    """
    pins = []
    sites = []
    for r in range(rows):
        for c in range(cols):
            x = center[0] + (c - (cols - 1) / 2.0) * spacing
            y = center[1] + (r - (rows - 1) / 2.0) * spacing
            z0 = float(geom.surface_z(x, y)) + pin_radius
            pins.append(CapsuleShape((x, y, z0), (x, y, z0 + length), pin_radius))
            sites.append((x, y))
    shape = pins[0] if len(pins) == 1 else UnionShape(tuple(pins), blend)
    return shape, np.array(sites)


def simulate_pin_array(H: ConversionMatrix, spacing: float, rows=3, cols=3, depth=0.5,
                       pin_radius=1.0, center=(0.0, 0.0), stiffness_factor=1.0) -> GroundTruthFrame:
    """Press a ``rows x cols`` array of hemispherical pins (identity pose).

    ``extras["pin_sites"]`` holds the pin centres and
    ``extras["resolution_limited"]`` is set when the pitch is below two
    marker spacings, where separate maxima cannot be guaranteed.
    """
    if not spacing > 0:
        raise ValueError("pin spacing must be positive")
    geom = _geometry(H)
    shape, sites = pin_array(geom, spacing, rows, cols, pin_radius, center)
    frame = simulate_press(H, SyntheticObject(shape), SensorPose.identity(), depth, stiffness_factor)
    frame.extras.update(pin_sites=sites, pin_radius=pin_radius,
                        resolution_limited=bool(spacing < 2.0 * geom.spacing))
    return frame


# -- scenarios --------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    obj: SyntheticObject
    poses: tuple
    frame_rate: float = 24.0
    depth: float = 0.5
    pixel_sigma: float = 0.0
    displacement_sigma: float = 0.0
    seed: int = 0
    slip_threshold: float = 0.1
    stiffness_factor: float = 1.0
    kind: str = "slide"

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise ValueError("frame rate must be positive")
        if self.depth < 0:
            raise ValueError("indentation must be non-negative")
        if self.pixel_sigma < 0 or self.displacement_sigma < 0:
            raise ValueError("noise levels must be non-negative")


def simulate_slide(H: ConversionMatrix, scenario: Scenario):
    """Quasi-static sliding along the scenario's pose trajectory.

    A contact marker slips when the tangential part of its commanded motion
    since the previous frame reaches ``slip_threshold``; the object then
    pulls it with ``mu * normal`` against that motion.  Slower markers stick
    and carry ``mu * normal * motion / threshold`` along the same direction.
    Frame 0 uses the motion towards frame 1.

    Raises
    ------
    ContactLost
        A frame has no marker in contact.
    """
    geom = _geometry(H)
    rest = geom.marker_positions()
    n = len(rest)
    k_c = contact_stiffness(H, scenario.stiffness_factor)
    poses = [_indented(p, scenario.depth) for p in scenario.poses]
    obj = scenario.obj
    frames = []
    for k, pose in enumerate(poses):
        here = rest @ pose.R.T + pose.t
        if len(poses) == 1:
            motion = np.zeros((n, 3))
        elif k == 0:
            motion = rest @ poses[1].R.T + poses[1].t - here
        else:
            motion = here - (rest @ poses[k - 1].R.T + poses[k - 1].t)
        g = obj.shape.gradient(here)
        mt = motion - np.sum(motion * g, axis=1)[:, None] * g
        dist = np.linalg.norm(mt, axis=1)
        slip_cmd = dist >= scenario.slip_threshold
        ratio = np.where(slip_cmd, 1.0, dist / scenario.slip_threshold)

        def scale(x, ratio=ratio):
            return obj.friction(x) * ratio

        u, F, lam, m, cs, it = _solve_contact(H, rest, obj, pose, -mt, scale, k_c)
        contact = lam > 0
        if not np.any(contact):
            raise ContactLost(f"no marker in contact at frame {k}", frame=k)
        x = (rest + u) @ pose.R.T + pose.t
        mu = np.where(contact, obj.friction(x), np.nan)
        frames.append(GroundTruthFrame(
            k, scenario.poses[k].timestamp, rest, u, F, contact, contact & slip_cmd, mu, lam, m, pose,
            it, {"k_c": k_c, "commanded_motion": mt}))
    return frames


def add_noise(frame: GroundTruthFrame, sigma: float, seed=0):
    """Displacements with i.i.d. Gaussian noise, shape (N, 3)."""
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    if sigma == 0:
        return frame.displacements.copy()
    rng = np.random.default_rng(seed)
    return frame.displacements + rng.normal(0.0, sigma, frame.displacements.shape)


def render_markers(solution: LightPathSolution, markers, pixel_sigma=0.0, seed=0,
                   stack: LayerStack | None = None):
    """Pixel observations of sensor-frame markers in both virtual cameras.

    With ``stack`` set, each sight line is refracted through the glass and
    silicone layers.

    Raises
    ------
    OutOfFrustum
        Some marker falls outside either camera's image window.
    """
    P = np.atleast_2d(np.asarray(markers, dtype=float))
    out = []
    bad = set()
    for cam in solution.virtual_cameras:
        ahead = cam.to_camera(P)[:, 2] > 0.0
        px = np.full((len(P), 2), np.nan)
        if ahead.any():
            px[ahead] = project_refracted(cam, stack, P[ahead]) if stack is not None else project(cam, P[ahead])
        visible = ahead.copy()
        visible[ahead] = cam.in_window(px[ahead])
        bad.update(np.flatnonzero(~visible).tolist())
        out.append(px)
    if bad:
        raise OutOfFrustum(f"{len(bad)} marker(s) not visible to both cameras", markers=sorted(bad))
    if pixel_sigma > 0:
        rng = np.random.default_rng(seed)
        out = [px + rng.normal(0.0, pixel_sigma, px.shape) for px in out]
    return out[0], out[1]


# -- scenario files ---------------------------------------------------------

_SHAPES = {"plane": PlaneShape, "sphere": SphereShape, "box": BoxShape, "capsule": CapsuleShape}


def _shape_from(d):
    kind = d["type"]
    if kind == "union":
        return UnionShape(tuple(_shape_from(p) for p in d["parts"]), float(d.get("blend", 0.0)))
    params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k != "type"}
    return _SHAPES[kind](**params)


def _trajectory(d, frame_rate):
    """Linear interpolation between waypoints at the frame rate."""
    rot = d.get("quaternion_wxyz", [1.0, 0.0, 0.0, 0.0])
    way = np.asarray(d["waypoints"], dtype=float)
    if "frames" in d:
        n = int(d["frames"])
        s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
        seg = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(way, axis=0), axis=1))]
        total = seg[-1] if seg[-1] > 0 else 1.0
        pts = np.column_stack([np.interp(s * total, seg, way[:, a]) for a in range(3)]) if len(way) > 1 \
            else np.repeat(way, n, axis=0)
    else:
        pts = way
    return tuple(pose_from(p, rot, k / frame_rate) for k, p in enumerate(pts))


def scenario_from_dict(d) -> Scenario:
    """Build a :class:`Scenario` from a parsed config mapping.

    Keys: ``object`` (``type`` plus shape parameters, ``union`` with
    ``parts`` and optional ``blend``), ``friction`` (:class:`FrictionField` fields), ``trajectory``
    (``waypoints``, optional ``frames`` and ``quaternion_wxyz``), and the
    scalar :class:`Scenario` fields.
    """
    frame_rate = float(d.get("frame_rate", 24.0))
    fr = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.get("friction", {}).items()}
    obj = SyntheticObject(_shape_from(d["object"]), FrictionField(**fr) if fr else FrictionField())
    scalars = {k: d[k] for k in ("depth", "pixel_sigma", "displacement_sigma", "seed", "slip_threshold",
                                 "stiffness_factor", "kind") if k in d}
    traj = d.get("trajectory", {"waypoints": [[0.0, 0.0, 0.0]]})
    return Scenario(obj, _trajectory(traj, frame_rate), frame_rate, **scalars)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(yaml.safe_load(fh))


FLIP_WXYZ = (0.0, 1.0, 0.0, 0.0)  # half turn about x: diag(1, -1, -1)


def facing_down_pose(geom: FingertipGeometry, x=0.0, y=0.0, timestamp=0.0):
    """Sensor facing -z with its apex touching the plane ``z = 0`` at (x, y)."""
    return SensorPose(np.diag([1.0, -1.0, -1.0]), np.array([x, y, geom.thickness]), timestamp)
