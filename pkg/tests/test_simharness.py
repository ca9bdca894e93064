import math

import numpy as np
import pytest
from scipy.ndimage import maximum_filter

from vbtactile.contact import compression, estimate_normals, noise_floor_threshold
from vbtactile.elasticity import FingertipGeometry, build_conversion_matrix
from vbtactile.errors import ContactLost, OutOfFrustum
from vbtactile.forcesolve import build_kernel, solve_forces
from vbtactile.friction import detect_slip
from vbtactile.geometry.optics import triangulate
from vbtactile.geometry.refraction import LayerStack, apply_compensation, fit_refraction_compensation
from vbtactile.mapping import GlobalCloud, SensorPose, accumulate
from vbtactile.simharness import (
    BoxShape, CapsuleShape, FrictionField, PlaneShape, Scenario, SphereShape, SyntheticObject, UnionShape,
    add_noise, facing_down_pose, load_scenario, pin_array, pose_from, render_markers, simulate_pin_array,
    simulate_press, simulate_slide,
)

GEOM = FingertipGeometry(subdivisions=1)


def _probe(x, y, radius=1.0):
    top = float(GEOM.surface_z(x, y))
    return SyntheticObject(SphereShape((x, y, top + radius), radius))


def _slide(H, friction, xs, depth=1.0, y=0.0, **kw):
    obj = SyntheticObject(PlaneShape(), friction)
    poses = tuple(facing_down_pose(GEOM, x, y, k / 24.0) for k, x in enumerate(xs))
    return simulate_slide(H, Scenario(obj, poses, depth=depth, **kw))


def _coulomb_ok(frame):
    fn = np.sum(frame.forces * frame.object_normals, axis=1)
    ft = np.linalg.norm(frame.tangential(), axis=1)
    c = frame.contact
    assert np.all(fn[c] > 0)
    s = frame.slip
    assert np.allclose(ft[s], frame.mu[s] * fn[s], rtol=0, atol=1e-9 * max(1.0, fn.max()))
    stick = c & ~s
    assert np.all(ft[stick] <= frame.mu[stick] * fn[stick] + 1e-9)
    assert np.all(frame.forces[~c] == 0.0)


def test_zero_depth_gives_nothing(sensor_h):
    H = sensor_h[0]
    frame = simulate_press(H, SyntheticObject(PlaneShape()), facing_down_pose(GEOM), 0.0)
    assert not frame.forces.any() and not frame.displacements.any() and not frame.contact.any()
    with pytest.raises(ValueError):
        simulate_press(H, SyntheticObject(PlaneShape()), facing_down_pose(GEOM), -0.1)


def test_flat_press_is_linear_in_depth():
    g = FingertipGeometry(rows=8, cols=8, radius=math.inf, subdivisions=1)
    H = build_conversion_matrix(g)[0]
    obj = SyntheticObject(PlaneShape())
    a = simulate_press(H, obj, facing_down_pose(g), 0.1)
    b = simulate_press(H, obj, facing_down_pose(g), 0.2)
    assert a.contact.all() and np.array_equal(a.contact, b.contact)
    ratio = b.normal_force.sum() / a.normal_force.sum()
    assert abs(ratio - 2.0) / 2.0 < 0.05


def test_press_solve_round_trip(sensor_h):
    H = sensor_h[0]
    frame = simulate_press(H, _probe(2.0, -1.0, 3.0), pose_from(), 0.6)
    assert frame.contact.sum() > 1
    F = solve_forces(build_kernel(H, 0.0), frame.displacement_vector).forces
    assert np.linalg.norm(F - frame.force_vector) / np.linalg.norm(frame.force_vector) < 1e-6
    _coulomb_ok(frame)


@pytest.mark.parametrize("site", [(-4.445, 3.175), (5.715, -0.635)])
def test_probe_force_localised(sensor_h, site):
    H = sensor_h[0]
    frame = simulate_press(H, _probe(*site), pose_from(), 0.8)
    F = solve_forces(build_kernel(H, 0.0), frame.displacement_vector)
    comp = compression(F, GEOM.outward_normals())
    peak = GEOM.marker_xy()[np.argmax(comp)]
    assert np.linalg.norm(peak - site) <= GEOM.spacing


def test_single_pin_reduces_to_press(sensor_h):
    H = sensor_h[0]
    pin = simulate_pin_array(H, 2.54, rows=1, cols=1, depth=0.7, center=(0.635, 0.635))
    shape, _ = pin_array(GEOM, 2.54, 1, 1, 1.0, (0.635, 0.635))
    ref = simulate_press(H, SyntheticObject(shape), SensorPose.identity(), 0.7)
    assert np.array_equal(pin.forces, ref.forces)
    # the capsule's tip is a 1 mm sphere, so a spherical probe gives the same field
    ball = simulate_press(H, _probe(0.635, 0.635), pose_from(), 0.7)
    assert np.allclose(pin.forces, ball.forces, rtol=0, atol=1e-12)


def _maxima(field, threshold):
    Z = field.reshape(GEOM.rows, GEOM.cols)
    mf = maximum_filter(Z, size=3, mode="constant", cval=-np.inf)
    return np.argwhere((Z == mf) & (Z >= threshold))


def test_pin_pitch_below_resolution_is_reported(sensor_h):
    H = sensor_h[0]
    coarse = simulate_pin_array(H, 2.54, depth=0.5, center=(0.3, 0.2))
    fine = simulate_pin_array(H, 0.5, depth=0.5, center=(0.3, 0.2))
    assert not coarse.extras["resolution_limited"]
    assert fine.extras["resolution_limited"]
    K = build_kernel(H, 0.0)
    N = estimate_normals(GEOM.marker_positions(), outward=GEOM.outward_normals())
    thr = noise_floor_threshold(K, N, 0.001)
    comp = compression(solve_forces(K, fine.displacement_vector), N)
    assert len(_maxima(comp, thr)) < 9


def test_uniform_friction_ratio(sensor_h):
    frames = _slide(sensor_h[0], FrictionField("uniform", (0.6,)), [0.0, 0.5, 1.0, 1.5])
    for f in frames:
        _coulomb_ok(f)
        assert f.slip.sum() == f.contact.sum() > 0
        fn = np.sum(f.forces * f.object_normals, axis=1)
        ratio = np.linalg.norm(f.tangential(), axis=1)[f.contact] / fn[f.contact]
        assert np.allclose(ratio, 0.6, atol=1e-9)


def test_two_material_boundary_switch(sensor_h):
    field = FrictionField("halfspace", (0.9, 0.3))
    xs = np.arange(-16.0, 16.5, 4.0)
    frames = _slide(sensor_h[0], field, xs)
    for f in frames:
        _coulomb_ok(f)
        x = f.global_positions[f.contact]
        expect = np.where(x[:, 0] < 0, 0.9, 0.3)
        assert np.array_equal(f.mu[f.contact], expect)
    first = [np.nanmax(f.mu) for f in frames]
    assert first[0] == 0.9 and first[-1] == 0.3


def test_stationary_trajectory_never_slips(sensor_h):
    frames = _slide(sensor_h[0], FrictionField("uniform", (0.5,)), [1.0, 1.0, 1.0])
    for f in frames:
        assert not f.slip.any()
        assert np.allclose(f.tangential(), 0.0, atol=1e-15)


def test_slow_motion_sticks_within_cone(sensor_h):
    frames = _slide(sensor_h[0], FrictionField("uniform", (0.5,)), [0.0, 0.05, 0.1], slip_threshold=0.1)
    for f in frames:
        assert not f.slip.any()
        _coulomb_ok(f)
    assert np.linalg.norm(frames[1].tangential(), axis=1).max() > 0


def test_fast_slide_flags_every_contact_marker(sensor_h):
    frames = _slide(sensor_h[0], FrictionField("uniform", (0.4,)), [0.0, 1.0, 2.0])
    for a, b in zip(frames, frames[1:]):
        # positions relative to the fixed object: stuck markers would not move
        mask = detect_slip(a.global_positions, b.global_positions, a.contact, b.contact, 0.1)
        assert np.array_equal(mask, a.contact & b.contact) and mask.any()


def test_contact_lost_reports_frame(sensor_h):
    obj = SyntheticObject(PlaneShape())
    poses = (facing_down_pose(GEOM, 0.0), facing_down_pose(GEOM, 1.0),
             SensorPose(np.diag([1.0, -1.0, -1.0]), [2.0, 0.0, GEOM.thickness + 5.0], 2 / 24))
    with pytest.raises(ContactLost) as info:
        simulate_slide(sensor_h[0], Scenario(obj, poses, depth=0.5))
    assert info.value.frame == 2


def test_slide_is_deterministic(sensor_h):
    field = FrictionField("halfspace", (0.9, 0.3))
    a = _slide(sensor_h[0], field, [-1.0, 0.0, 1.0])
    b = _slide(sensor_h[0], field, [-1.0, 0.0, 1.0])
    for fa, fb in zip(a, b):
        assert fa.forces.tobytes() == fb.forces.tobytes()
        assert fa.displacements.tobytes() == fb.displacements.tobytes()


def test_sliding_over_sphere_accumulates_on_surface(sensor_h):
    R = 40.0
    obj = SyntheticObject(SphereShape((0.0, 0.0, -R), R), FrictionField("uniform", (0.5,)))
    poses = tuple(facing_down_pose(GEOM, x, 0.0, k / 24) for k, x in enumerate([0.0, 1.0]))
    frames = simulate_slide(sensor_h[0], Scenario(obj, poses, depth=0.6))
    cloud = GlobalCloud.empty()
    for f in frames:
        cloud = accumulate(cloud, f.global_positions[f.contact], f.index)
    assert len(cloud) > 20
    dist = np.abs(np.linalg.norm(cloud.points - [0.0, 0.0, -R], axis=1) - R)
    assert dist.max() < 0.2


def test_add_noise(sensor_h):
    frame = simulate_press(sensor_h[0], _probe(0.635, 0.635), pose_from(), 0.5)
    assert np.array_equal(add_noise(frame, 0.0), frame.displacements)
    assert np.array_equal(add_noise(frame, 0.01, 4), add_noise(frame, 0.01, 4))
    assert not np.array_equal(add_noise(frame, 0.01, 4), add_noise(frame, 0.01, 5))
    with pytest.raises(ValueError):
        add_noise(frame, -1.0)


def test_noise_variance():
    g = FingertipGeometry(rows=1, cols=1)
    from vbtactile.simharness import GroundTruthFrame
    n = 34000  # 1.02e5 components
    z = np.zeros((n, 3))
    frame = GroundTruthFrame(0, 0.0, z, z, z, np.zeros(n, bool), np.zeros(n, bool), np.full(n, np.nan),
                             np.zeros(n), z, SensorPose.identity())
    sigma = 0.005
    e = add_noise(frame, sigma, seed=9).ravel()
    assert e.size >= 1e5 and g.n_markers == 1
    assert abs(e.var() / sigma ** 2 - 1.0) < 0.02


def test_render_triangulate_round_trip(light_path):
    P = GEOM.marker_positions() + [0.05, -0.02, -0.3]
    left, right = light_path.virtual_cameras
    pl, pr = render_markers(light_path, P)
    X, _ = triangulate(left, right, pl, pr)
    assert np.abs(X - P).max() < 1e-9
    a = render_markers(light_path, P, 0.1, seed=2)
    b = render_markers(light_path, P, 0.1, seed=2)
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[0], pl)


def test_render_out_of_frustum(light_path):
    P = np.array([[0.0, 0.0, 8.0], [500.0, 0.0, 8.0]])
    with pytest.raises(OutOfFrustum) as info:
        render_markers(light_path, P)
    assert info.value.markers == (1,)


def test_refraction_compensated_render(light_path):
    stack = LayerStack()
    left, right = light_path.virtual_cameras
    rng = np.random.default_rng(3)
    cal = np.column_stack([rng.uniform(-13.5, 13.5, (400, 2)), rng.uniform(3.0, 9.0, 400)])
    obs, _ = triangulate(left, right, *render_markers(light_path, cal, stack=stack))
    poly = fit_refraction_compensation(obs, cal, degree=3)
    P = GEOM.marker_positions() + [0.1, 0.1, -0.4]
    seen, _ = triangulate(left, right, *render_markers(light_path, P, stack=stack))
    res = apply_compensation(poly, seen)
    err = np.linalg.norm(res.position - P, axis=1)
    assert np.sqrt(np.mean(err ** 2)) < 0.005


SHAPES = [
    PlaneShape((1.0, -2.0, 0.5), (0.3, 0.4, 1.0)),
    SphereShape((1.0, 2.0, 3.0), 4.0),
    BoxShape((0.0, 1.0, -1.0), (2.0, 3.0, 1.5)),
    CapsuleShape((0.0, 0.0, 0.0), (3.0, 1.0, 5.0), 1.2),
    UnionShape((SphereShape((0.0, 0.0, 0.0), 2.0), BoxShape((3.0, 0.0, 0.0), (1.0, 1.0, 1.0)))),
    UnionShape((SphereShape((0.0, 0.0, 0.0), 2.0), SphereShape((1.5, 0.0, 0.0), 2.0)), blend=0.3),
]


@pytest.mark.parametrize("shape", SHAPES, ids=[type(s).__name__ + str(k) for k, s in enumerate(SHAPES)])
def test_signed_distance_is_one_lipschitz(shape):
    rng = np.random.default_rng(11)
    a = rng.uniform(-8, 8, (4000, 3))
    b = a + rng.normal(0, 1.5, a.shape)
    da, db = shape.sdf(a), shape.sdf(b)
    assert np.all(np.abs(da - db) <= np.linalg.norm(a - b, axis=1) + 1e-12)
    g = shape.gradient(a)
    assert np.allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-9)
    # the gradient points along a central difference away from kinks
    h = 1e-6
    x = a[:50]
    fd = np.column_stack([(shape.sdf(x + h * e) - shape.sdf(x - h * e)) / (2 * h) for e in np.eye(3)])
    fd /= np.linalg.norm(fd, axis=1, keepdims=True)
    close = np.linalg.norm(fd - shape.gradient(x), axis=1) < 1e-5
    assert close.mean() > 0.9


def test_friction_field_variants():
    assert FrictionField("uniform", (0.6,))([[1.0, 2.0, 3.0]]).tolist() == [0.6]
    half = FrictionField("halfspace", (0.9, 0.3))
    assert half([[-1.0, 0, 0], [1.0, 0, 0]]).tolist() == [0.9, 0.3]
    assert half.boundary_distance([[-2.5, 7.0, 1.0]]).tolist() == [2.5]
    sector = FrictionField("sector", (0.2, 0.7, 0.4), normal=(0, 0, 1), reference=(1, 0, 0),
                           edges=(0.0, 90.0, 180.0, 360.0))
    pts = [[1.0, 0.1, 0.0], [-1.0, 0.1, 0.0], [0.0, -1.0, 0.0]]
    assert sector(pts).tolist() == [0.2, 0.7, 0.4]
    with pytest.raises(ValueError):
        FrictionField("uniform", (-0.1,))
    with pytest.raises(ValueError):
        FrictionField("halfspace", (0.5,))
    with pytest.raises(ValueError):
        FrictionField("spiral", (0.5,))


def test_scenario_file(tmp_path):
    cfg = tmp_path / "scene.yaml"
    cfg.write_text(
        "object: {type: plane, point: [0, 0, 0], normal: [0, 0, 1]}\n"
        "friction: {kind: halfspace, values: [0.9, 0.3]}\n"
        "trajectory:\n"
        "  waypoints: [[-2, 0, 8], [2, 0, 8]]\n"
        "  frames: 5\n"
        "  quaternion_wxyz: [0, 1, 0, 0]\n"
        "frame_rate: 10\n"
        "depth: 0.4\n"
        "seed: 7\n")
    sc = load_scenario(cfg)
    assert len(sc.poses) == 5 and sc.depth == 0.4 and sc.seed == 7
    assert np.allclose([p.t[0] for p in sc.poses], [-2, -1, 0, 1, 2])
    assert np.allclose(sc.poses[0].R, np.diag([1.0, -1.0, -1.0]))
    assert sc.poses[3].timestamp == pytest.approx(0.3)
    assert sc.obj.friction([[-1.0, 0, 0]]).tolist() == [0.9]
    with pytest.raises(ValueError):
        Scenario(sc.obj, sc.poses, frame_rate=0.0)
