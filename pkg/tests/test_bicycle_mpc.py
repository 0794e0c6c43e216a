import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bicycle_mpc import (ControlCommand, DynamicVehicle, MpcError, MpcProblem, VehicleLimits, reference_from_points,
                         rollout, shift_controls, solve_mpc, solve_mpc_to_point, step_bicycle)

LIMITS = VehicleLimits()


def test_straight_euler_step():
    s = step_bicycle(DynamicVehicle(0.0, 0.0, 0.0, 10.0), ControlCommand(0.0, 0.0), 0.1)
    assert (s.x, s.y, s.theta, s.v) == pytest.approx((1.0, 0.0, 0.0, 10.0))


def test_heading_rate_uses_pre_update_speed():
    s = step_bicycle(DynamicVehicle(0.0, 0.0, 0.0, 5.0), ControlCommand(3.0, math.atan(0.5)), 0.1)
    assert s.theta == pytest.approx(0.1)
    assert s.v == pytest.approx(5.3)


def test_commands_are_clipped():
    s = step_bicycle(DynamicVehicle(0.0, 0.0, 0.0, 14.9), ControlCommand(50.0, 2.0), 0.1)
    assert s.v == pytest.approx(LIMITS.v_max)
    assert s.theta == pytest.approx(14.9 * math.tan(LIMITS.steer_max) / 2.5 * 0.1)
    stopped = step_bicycle(DynamicVehicle(0.0, 0.0, 0.0, 0.1), ControlCommand(-3.0, 0.0), 0.1)
    assert stopped.v == 0.0


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-3.0, 3.0), st.floats(-0.6, 0.6))
def test_zero_speed_zero_accel_is_a_fixed_point(x, y, theta, steer):
    s = DynamicVehicle(x, y, theta, 0.0)
    after = step_bicycle(s, ControlCommand(0.0, steer), 0.1)
    assert (after.x, after.y, after.v) == (s.x, s.y, 0.0)
    assert after.theta == pytest.approx(s.theta, abs=1e-12)


def test_constant_steer_traces_a_circle():
    steer, v, dt = 0.3, 5.0, 1e-3
    radius = 2.5 / math.tan(steer)
    steps = int(round(2 * math.pi * radius / v / dt))
    controls = np.tile([0.0, steer], (steps, 1))
    states = rollout(np.array([0.0, 0.0, 0.0, v]), controls, dt, LIMITS)
    distances = np.linalg.norm(states[:, :2] - np.array([0.0, radius]), axis=1)
    assert np.max(np.abs(distances - radius)) / radius < 0.01
    assert states[-1, 2] == pytest.approx(2 * math.pi, rel=1e-3)


def test_batched_rollout_matches_step_by_step():
    controls = np.array([[1.0, 0.1], [-0.5, -0.2], [0.0, 0.4]])
    states = rollout(np.array([1.0, 2.0, 0.3, 6.0]), controls, 0.2, LIMITS)
    s = DynamicVehicle(1.0, 2.0, 0.3, 6.0)
    for i, (a, d) in enumerate(controls):
        s = step_bicycle(s, ControlCommand(a, d), 0.2)
        np.testing.assert_allclose(states[i, [0, 1, 3]], [s.x, s.y, s.v], atol=1e-12)


def test_mpc_on_straight_reference_returns_zero_commands():
    initial = DynamicVehicle(0.0, 0.0, 0.0, 10.0)
    reference = np.column_stack([np.arange(1, 11) * 1.0, np.zeros(10), np.zeros(10)])
    solution = solve_mpc(MpcProblem(initial, reference, 0.1))
    np.testing.assert_allclose(solution.controls, 0.0, atol=1e-6)
    assert np.linalg.norm(solution.rollout[-1, :2] - reference[-1, :2]) < 0.1


def _known_reference():
    initial = DynamicVehicle(0.0, 0.0, 0.0, 8.0)
    controls = np.tile([0.5, 0.1], (10, 1))
    states = rollout(initial.as_array(), controls, 0.2, LIMITS)
    return initial, states[:, :3]


def test_mpc_recovers_known_controls():
    initial, reference = _known_reference()
    solution = solve_mpc(MpcProblem(initial, reference, 0.2))
    rms = np.sqrt(np.mean(np.sum((solution.rollout[:, :2] - reference[:, :2]) ** 2, axis=1)))
    assert rms < 0.05
    assert solution.cost <= solution.zero_cost


def test_mpc_heading_residual_is_wrapped():
    initial, reference = _known_reference()
    shifted = reference.copy()
    shifted[:, 2] += 2 * math.pi
    a = solve_mpc(MpcProblem(initial, reference, 0.2))
    b = solve_mpc(MpcProblem(initial, shifted, 0.2))
    np.testing.assert_allclose(a.rollout[:, :2], b.rollout[:, :2], atol=1e-4)
    assert b.cost == pytest.approx(a.cost, abs=1e-8)


def test_mpc_warm_start_is_never_worse():
    initial, reference = _known_reference()
    warm = np.tile([0.5, 0.1], (10, 1))
    solution = solve_mpc(MpcProblem(initial, reference, 0.2), warm_start=warm)
    assert solution.cost < 1e-12


def test_mpc_rejects_bad_problems():
    initial = DynamicVehicle(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(MpcError):
        MpcProblem(initial, np.array([[np.nan, 0.0, 0.0]]), 0.1)
    with pytest.raises(MpcError):
        MpcProblem(initial, np.zeros((3, 2)), 0.1)
    with pytest.raises(MpcError):
        solve_mpc(MpcProblem(initial, np.zeros((3, 3)), 0.1), warm_start=np.zeros((2, 2)))


def test_endpoint_straight_ahead_needs_no_control():
    initial = DynamicVehicle(0.0, 0.0, 0.0, 10.0)
    solution = solve_mpc_to_point(initial, (10.0, 0.0, 0.0), J=10, dt=0.1)
    np.testing.assert_allclose(solution.controls, 0.0, atol=1e-6)
    assert np.linalg.norm(solution.rollout[-1, :2] - [10.0, 0.0]) < 0.1


def test_endpoint_with_lateral_offset():
    initial = DynamicVehicle(0.0, 0.0, 0.0, 10.0)
    solution = solve_mpc_to_point(initial, (20.0, 2.0, 0.0), J=10, dt=0.2)
    final = solution.rollout[-1]
    assert np.linalg.norm(final[:2] - [20.0, 2.0]) < 0.2
    assert abs(final[2]) < 0.1
    assert np.all(np.abs(solution.controls[:, 1]) <= LIMITS.steer_max)


def test_single_step_horizon():
    initial = DynamicVehicle(0.0, 0.0, 0.0, 10.0)
    solution = solve_mpc_to_point(initial, (1.0, 0.5, 0.3), J=1, dt=0.1)
    assert solution.controls.shape == (1, 2)
    s = step_bicycle(initial, solution.first, 0.1)
    np.testing.assert_allclose(solution.rollout[0], [s.x, s.y, s.theta, s.v], atol=1e-12)


def test_reference_headings():
    initial = DynamicVehicle(0.0, 0.0, 0.25, 5.0)
    ref = reference_from_points(initial, [[1.0, 0.0], [2.0, 0.0], [2.0, 1.0]])
    np.testing.assert_allclose(ref[:, 2], [0.0, math.pi / 2, math.pi / 2])
    single = reference_from_points(initial, [[0.0, 3.0]])
    assert single[0, 2] == pytest.approx(math.pi / 2)
    parked = reference_from_points(initial, [[0.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(parked[:, 2], 0.25)


def test_shift_controls_holds_last_command():
    controls = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    np.testing.assert_allclose(shift_controls(controls, 0.1, 0.1), [[1.0, 1.0], [2.0, 2.0], [2.0, 2.0]])
    np.testing.assert_allclose(shift_controls(controls, 0.05, 0.1)[0], [0.5, 0.5])


def test_mirrored_reference_mirrors_the_solution():
    initial = DynamicVehicle(0.0, 0.0, 0.0, 8.0)
    left = rollout(initial.as_array(), np.tile([0.5, 0.1], (10, 1)), 0.2, LIMITS)[:, :3]
    right = left * np.array([1.0, -1.0, -1.0])
    a = solve_mpc(MpcProblem(initial, left, 0.2))
    b = solve_mpc(MpcProblem(initial, right, 0.2))
    np.testing.assert_allclose(b.controls, a.controls * np.array([1.0, -1.0]), atol=1e-3)
    np.testing.assert_allclose(b.rollout[:, 1], -a.rollout[:, 1], atol=1e-3)


@pytest.mark.parametrize("speed, expected", [(-2.0, 0.0), (7.5, 7.5), (40.0, 15.0)])
def test_speed_is_clamped_to_the_vehicle_range(speed, expected):
    assert DynamicVehicle(0.0, 0.0, 0.0, speed).v == expected
    assert DynamicVehicle(0.0, 0.0, 0.0, speed, v_max=5.0).v == min(expected, 5.0)


def test_non_finite_speed_is_rejected():
    with pytest.raises(ValueError):
        DynamicVehicle(0.0, 0.0, 0.0, float("nan"))
