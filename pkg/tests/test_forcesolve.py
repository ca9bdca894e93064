import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vbtactile.elasticity import to_blocks
from vbtactile.errors import DegenerateAxis, DimensionMismatch, IllConditioned
from vbtactile.forcesolve import (
    AxisCalibration, ForceField, Regularizer, apply_calibration, build_kernel, calibrate_axes, resultant,
    solve_forces, sweep_regularizer,
)


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


def test_zero_weight_is_plain_inverse():
    H = _spd(12, 0)
    K = build_kernel(H, 0.0)
    assert np.linalg.norm(K.K @ H - np.eye(12)) < 1e-8


def test_matches_dense_normal_equations():
    H = _spd(12, 1)
    w = 0.1
    oracle = np.linalg.inv(H.T @ H + w * np.eye(12)) @ H.T
    K = build_kernel(H, Regularizer(w)).K
    assert np.abs(K - oracle).max() < 1e-10 * np.abs(oracle).max()


def test_large_weight_approaches_scaled_transpose():
    H = _spd(6, 2)
    w = 1e10
    K = build_kernel(H, w).K
    assert np.allclose(K, H.T / w, rtol=1e-6, atol=0)


def test_ill_conditioned_needs_regularisation():
    H = np.diag([1.0, 1.0, 1e-14])
    with pytest.raises(IllConditioned):
        build_kernel(H, 0.0)
    build_kernel(H, 1e-6)


def test_regularizer_rejects_negative():
    with pytest.raises(ValueError):
        Regularizer(-1.0)


def test_solve_zero_and_dimension_check():
    K = build_kernel(_spd(9, 3))
    assert np.array_equal(solve_forces(K, np.zeros(9)).forces, np.zeros(9))
    with pytest.raises(DimensionMismatch):
        solve_forces(K, np.zeros(8))


def test_round_trip_on_8x8_sensor(small_h):
    H = small_h[0]
    K = build_kernel(H, 0.0)
    rng = np.random.default_rng(7)
    F0 = rng.normal(size=(H.H.shape[0], 100))
    F = K.K @ (H.H @ F0)
    rel = np.linalg.norm(F - F0, axis=0) / np.linalg.norm(F0, axis=0)
    assert rel.max() <= 1e-8


def test_noisy_recovery_with_swept_weight(small_h):
    H = small_h[0]
    n = H.n_markers
    rng = np.random.default_rng(8)
    trials = []
    for _ in range(4):
        f = np.zeros((n, 3))
        f[rng.choice(n, 12, replace=False)] = rng.normal([0.0, 0.0, -0.05], 0.01, (12, 3))
        trials.append(to_blocks(f))
    sweep = sweep_regularizer(H, 0.005, trials, seed=1)
    K = build_kernel(H, sweep.w_best)
    F0 = trials[0]
    errs = []
    for k in range(20):
        D = H.H @ F0 + rng.normal(0.0, 0.005, F0.size)
        errs.append(np.abs(resultant(solve_forces(K, D)) - resultant(F0)).max())
    assert max(errs) / np.linalg.norm(resultant(F0)) < 0.05


def test_sweep_limits_and_determinism(small_h):
    H = small_h[0]
    F0 = np.random.default_rng(9).normal(size=(2, H.H.shape[0]))
    quiet = sweep_regularizer(H, 0.0, F0)
    assert quiet.w_best == quiet.w_grid[0]
    loud = sweep_regularizer(H, 0.05, F0, seed=3)
    assert loud.w_best > 0 and loud.w_best > loud.w_grid[0]
    again = sweep_regularizer(H, 0.05, F0, seed=3)
    assert loud.report_lines() == again.report_lines()
    with pytest.raises(ValueError):
        sweep_regularizer(H, -1.0, F0)


def test_regularisation_bias_is_monotone(small_h):
    H = small_h[0]
    D = np.random.default_rng(10).normal(size=H.H.shape[0])
    s1 = np.linalg.svd(H.H, compute_uv=False)[0]
    norms = [np.linalg.norm(solve_forces(build_kernel(H, w * s1 ** 2), D).forces)
             for w in np.logspace(-10, 2, 25)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-1, 1)), arrays(np.float64, 12, elements=st.floats(-1, 1)),
       st.floats(-5, 5), st.floats(-5, 5))
def test_solve_is_linear(d1, d2, a, b):
    K = build_kernel(_spd(12, 4), 0.05)
    lhs = solve_forces(K, a * d1 + b * d2).forces
    rhs = a * solve_forces(K, d1).forces + b * solve_forces(K, d2).forces
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * (1 + np.abs(lhs).max()))


def test_resultant_examples():
    assert np.array_equal(resultant(np.zeros(6)), np.zeros(3))
    single = ForceField.from_vectors([[0.0, 0.0, 1.0]])
    assert np.array_equal(resultant(single), [0, 0, 1])
    pair = ForceField.from_vectors([[0.3, -0.2, 1.0], [-0.3, 0.2, 0.5]])
    assert np.allclose(resultant(pair), [0, 0, 1.5])


def test_force_field_layout():
    f = ForceField.from_vectors([[1, 2, 3], [4, 5, 6]])
    assert f.forces.tolist() == [1, 4, 2, 5, 3, 6]
    assert f.n_markers == 2
    with pytest.raises(DimensionMismatch):
        ForceField(np.zeros(4))


def test_calibration_examples():
    rng = np.random.default_rng(11)
    truth = rng.uniform(-2, 2, (30, 3))
    assert np.allclose(calibrate_axes(truth, truth).as_array(), 1.0)
    assert np.allclose(calibrate_axes(truth / 2, truth).as_array(), 2.0)


def test_calibration_recovers_underestimated_axis():
    rng = np.random.default_rng(12)
    truth = rng.uniform(0.5, 3.0, (200, 3)) * rng.choice([-1, 1], (200, 3))
    meas = truth.copy()
    meas[:, 2] *= 0.8
    meas *= 1 + 0.01 * rng.normal(size=meas.shape)
    C = calibrate_axes(meas, truth)
    # independent regression through the origin
    slope = np.linalg.lstsq(meas[:, 2:3], truth[:, 2], rcond=None)[0][0]
    assert np.isclose(C.cz, slope, rtol=1e-12)
    assert abs(C.cz - 1.25) < 0.02


def test_calibration_is_idempotent():
    rng = np.random.default_rng(13)
    truth = rng.uniform(-2, 2, (40, 3))
    meas = truth * [0.9, 1.1, 0.7] + 0.01 * rng.normal(size=truth.shape)
    C = calibrate_axes(meas, truth)
    again = calibrate_axes(meas * C.as_array(), truth)
    assert np.allclose(again.as_array(), 1.0, atol=1e-10)


def test_calibration_errors():
    truth = np.ones((5, 3))
    meas = truth.copy()
    meas[:, 1] = 0.0
    with pytest.raises(DegenerateAxis):
        calibrate_axes(meas, truth)
    with pytest.raises(ValueError):
        calibrate_axes(truth[:1], truth[:1])
    with pytest.raises(ValueError):
        AxisCalibration(1.0, -1.0, 1.0)


def test_apply_calibration_scales_components():
    F = ForceField.from_vectors([[1.0, 1.0, 1.0], [2.0, -1.0, 0.5]], frame=3)
    out = apply_calibration(F, AxisCalibration(2.0, 3.0, 4.0))
    assert np.allclose(out.vectors, [[2, 3, 4], [4, -3, 2]])
    assert out.frame == 3
    assert np.allclose(resultant(out), resultant(F) * [2, 3, 4])
