import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from vbtactile.contact import (
    compression, decompose_force, detect_contact, estimate_normals, noise_floor_threshold,
)
from vbtactile.elasticity import FingertipGeometry
from vbtactile.errors import DegenerateNeighborhood
from vbtactile.forcesolve import ForceField, build_kernel
from vbtactile.simharness import SphereShape, SyntheticObject, pose_from, simulate_press


def _grid(n=6, z=0.0):
    g = np.arange(n, dtype=float)
    X, Y = np.meshgrid(g, g)
    return np.column_stack([X.ravel(), Y.ravel(), np.full(n * n, z)])


def test_plane_normals():
    N = estimate_normals(_grid()).normals
    assert np.allclose(N, [0, 0, 1], atol=1e-12)
    N = estimate_normals(_grid(), outward=(0, 0, -1)).normals
    assert np.allclose(N, [0, 0, -1], atol=1e-12)


def test_sphere_normals_match_radial_direction():
    g = FingertipGeometry()
    P = g.marker_positions()
    N = estimate_normals(P, outward=g.outward_normals()).normals
    exact = g.outward_normals()
    assert np.allclose(np.linalg.norm(N, axis=1), 1.0, atol=1e-9)
    interior = np.all(np.abs(g.marker_xy()) < 0.5 * 19 * 1.27 - 1.0, axis=1)
    ang = np.degrees(np.arccos(np.clip(np.sum(N * exact, axis=1), -1, 1)))
    assert ang[interior].max() < 1.0


def test_collinear_neighbourhood_raises():
    P = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateNeighborhood):
        estimate_normals(P, k=3)
    with pytest.raises(ValueError):
        estimate_normals(P, k=11)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normals_are_rotation_equivariant(seed):
    g = FingertipGeometry(rows=6, cols=6)
    P = g.marker_positions()
    R = Rotation.random(random_state=seed).as_matrix()
    ref = g.outward_normals()
    base = estimate_normals(P, outward=ref).normals
    rot = estimate_normals(P @ R.T, outward=ref @ R.T).normals
    assert np.allclose(rot, base @ R.T, atol=1e-9)


def test_decompose_examples():
    n = np.array([0.0, 0.0, 1.0])
    a, t = decompose_force([0.0, 0.0, -2.0], n)
    assert a == -2.0 and np.array_equal(t, [0, 0, 0])
    a, t = decompose_force([1.0, 1.0, 0.0], n)
    assert a == 0.0 and np.array_equal(t, [1, 1, 0])


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-100, 100)] * 3), st.tuples(*[st.floats(-1, 1)] * 3).filter(
    lambda v: np.linalg.norm(v) > 0.1))
def test_decomposition_is_exact_and_orthogonal(f, n):
    n = np.array(n) / np.linalg.norm(n)
    f = np.array(f)
    a, t = decompose_force(f, n)
    scale = 1 + np.abs(f).max()
    assert np.allclose(a * n + t, f, rtol=0, atol=1e-14 * scale)
    assert abs(t @ n) < 1e-13 * scale


def test_detect_contact_examples():
    N = np.tile([0.0, 0.0, 1.0], (4, 1))
    zero = ForceField.from_vectors(np.zeros((4, 3)))
    assert detect_contact(zero, N, 0.01).count == 0
    f = np.zeros((4, 3))
    f[2, 2] = -0.5  # pushed inward
    m = detect_contact(ForceField.from_vectors(f), N, 0.1)
    assert m.mask.tolist() == [False, False, True, False]
    assert np.all(compression(f, N)[m.mask] >= m.threshold)
    with pytest.raises(ValueError):
        detect_contact(zero, N, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_threshold_monotone(a, b):
    rng = np.random.default_rng(0)
    f = rng.normal(size=(50, 3))
    N = np.tile([0.0, 0.0, 1.0], (50, 1))
    lo, hi = sorted((a, b))
    assert not np.any(detect_contact(f, N, hi).mask & ~detect_contact(f, N, lo).mask)


def test_probe_press_localised(sensor_h):
    """A 2 mm probe marks contact within one marker spacing of its footprint."""
    H = sensor_h[0]
    g = FingertipGeometry(subdivisions=1)
    K = build_kernel(H, 0.0)
    for cx, cy in [(0.635, 0.635), (3.2, -2.1)]:
        top = float(g.surface_z(cx, cy))
        obj = SyntheticObject(SphereShape((cx, cy, top + 1.0), 1.0))
        frame = simulate_press(H, obj, pose_from(), 0.8)
        F = K.K @ frame.displacement_vector
        N = estimate_normals(g.marker_positions(), outward=g.outward_normals())
        thr = noise_floor_threshold(K, N, 0.001)
        mask = detect_contact(ForceField(F), N, thr).mask
        assert mask.any()
        xy = g.marker_xy()
        truth_xy = xy[frame.contact]
        dist = np.min(np.linalg.norm(xy[mask][:, None] - truth_xy[None], axis=2), axis=1)
        assert dist.max() <= g.spacing + 1e-9
        # footprint itself is found
        assert mask[frame.contact].all()


def test_noise_floor_scales_with_sigma(small_h):
    H = small_h[0]
    K = build_kernel(H, 0.0)
    N = np.tile([0.0, 0.0, 1.0], (H.n_markers, 1))
    a = noise_floor_threshold(K, N, 0.001, seed=1)
    b = noise_floor_threshold(K, N, 0.002, seed=1)
    assert np.isclose(b, 2 * a)
    assert noise_floor_threshold(K, N, 0.0) > 0
