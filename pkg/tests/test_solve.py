from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from algmech.algebroid import builtin_chart, tangent_bundle
from algmech.errors import NonConvergenceError
from algmech.mechanics import LagrangianProblem, lagrangian_field
from algmech.solve import (
    IntegrationError,
    ShootingProblem,
    Trajectory,
    admissible_path,
    compute_monitors,
    finite_difference_jet,
    integrate,
    oracle_action_gradient,
    read_csv,
    shoot,
)
from algmech.sorusk import SecondOrderProblem, second_order_lagrangian


def _oscillator(t, s):
    return np.array([s[1], -s[0]])


def test_constant_field_keeps_state():
    traj = integrate(lambda t, s: np.zeros(2), [1.5, -2.0], 1.0, "rk4", h=0.1)
    assert_array_equal(traj.states, np.tile([1.5, -2.0], (11, 1)))


def test_harmonic_oscillator_rk4():
    traj = integrate(_oscillator, [1.0, 0.0], 2.0, "rk4", h=1e-3)
    assert_allclose(traj.states[:, 0], np.cos(traj.t), atol=1e-10)
    assert_allclose(traj.states[:, 1], -np.sin(traj.t), atol=1e-10)


def test_rk4_is_fourth_order():
    errs = [abs(integrate(_oscillator, [1.0, 0.0], 1.0, "rk4", h=h).states[-1, 0] - math.cos(1.0))
            for h in (0.1, 0.05)]
    assert errs[0] / errs[1] >= 12


def test_rk45_matches_closed_form():
    traj = integrate(_oscillator, [1.0, 0.0], 3.0, "rk45", rtol=1e-10, atol=1e-12)
    assert abs(traj.states[-1, 0] - math.cos(3.0)) < 1e-8
    assert traj.t[-1] == 3.0


def test_rk45_failure_is_reported():
    with pytest.raises(IntegrationError) as info:
        integrate(lambda t, s: s**2, [1.0], 2.0, "rk45")
    assert info.value.time is not None and info.value.time <= 1.0 + 1e-6


def test_non_finite_field_is_reported():
    with pytest.raises(IntegrationError, match="non-finite"):
        integrate(lambda t, s: np.array([math.nan]), [0.0], 1.0)


@pytest.mark.parametrize("kwargs", [{"T": 0.0}, {"T": 1.0, "h": -1.0}, {"T": 1.0, "method": "euler"}])
def test_integrate_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        integrate(_oscillator, [1.0, 0.0], **kwargs)


def test_hermite_dense_output():
    traj = integrate(_oscillator, [1.0, 0.0], 1.0, "rk4", h=1e-2)
    tq = np.linspace(0.0, 1.0, 37)
    assert_allclose(traj(tq)[:, 0], np.cos(tq), atol=1e-8)
    with pytest.raises(ValueError):
        traj(1.5)


def test_finite_difference_of_cubic():
    traj = integrate(lambda t, s: np.array([3 * t**2]), [0.0], 2.0, "rk4", h=1e-2)
    assert finite_difference_jet(traj, 0, 3, 1.0) == pytest.approx(6.0, abs=1e-6)
    assert finite_difference_jet(traj, 0, 1, 1.0) == pytest.approx(3.0, abs=1e-6)


def test_finite_difference_of_sine():
    traj = integrate(_oscillator, [0.0, 1.0], 1.0, "rk4", h=1e-3, labels=("q", "v"))
    assert finite_difference_jet(traj, "q", 2, 0.5) == pytest.approx(-math.sin(0.5), abs=1e-6)
    with pytest.raises(ValueError, match="stencil"):
        finite_difference_jet(traj, "q", 2, 0.0)
    with pytest.raises(ValueError, match="order"):
        finite_difference_jet(traj, "q", 4, 0.5)


def test_csv_round_trip_is_exact(tmp_path):
    mon = {"E": lambda t, s: 0.5 * (s @ s)}
    traj = integrate(_oscillator, [1.0 / 3.0, math.pi], 1.0, "rk4", h=0.1, monitors=mon, labels=("q", "v"))
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    head, table = read_csv(path)
    assert head == ["t", "q", "v", "E"]
    assert_array_equal(table[:, 1:3], traj.states)
    assert_array_equal(table[:, 3], traj.monitors["E"])


def test_monitors_are_recomputed_from_states():
    mon = {"E": lambda t, s: 0.5 * (s @ s)}
    traj = integrate(_oscillator, [1.0, 0.5], 1.0, "rk4", h=0.05, monitors=mon)
    assert_array_equal(compute_monitors(traj.t, traj.states, mon)["E"], traj.monitors["E"])


def test_trajectory_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), np.zeros((2, 1)), np.zeros((2, 1)))


# --------------------------------------------------------------------------
# shooting


def _oscillator_bvp(target: float, segments: int = 1) -> ShootingProblem:
    return ShootingProblem(_oscillator, 1.0, lambda u: np.array([0.0, u[0]]),
                           lambda s0, sT: [sT[0] - target], 1, segments=segments, h=1e-3)


def test_shooting_recovers_known_velocity():
    target = integrate(_oscillator, [0.0, 0.7], 1.0, "rk4", h=1e-3).states[-1, 0]
    res, traj = shoot(_oscillator_bvp(target), [0.2], newton_tol=1e-12)
    assert res.converged and res.iterations <= 2
    assert res.residual_norm < 1e-12
    assert res.unknowns[0] == pytest.approx(0.7, abs=1e-10)
    assert traj.states[-1, 0] == pytest.approx(target, abs=1e-12)
    assert res.to_dict()["residual_history"][0] > res.residual_norm


def test_shooting_is_invariant_under_unknown_reordering():
    def make(order):
        def init(u):
            w = np.empty(2)
            w[list(order)] = u
            return np.array([w[0], w[1]])

        return ShootingProblem(_oscillator, 1.0, init, lambda s0, sT: sT - [0.3, -0.4], 2, h=1e-3)

    a, _ = shoot(make((0, 1)), [0.0, 0.0])
    b, _ = shoot(make((1, 0)), [0.0, 0.0])
    assert_allclose(a.unknowns, b.unknowns[::-1], atol=1e-10)


def test_multiple_shooting_agrees_with_single():
    single, _ = shoot(_oscillator_bvp(0.5), [0.0])
    multi, _ = shoot(_oscillator_bvp(0.5, segments=3), [0.0])
    assert multi.converged
    assert multi.unknowns[0] == pytest.approx(single.unknowns[0], abs=1e-9)


def test_singular_shooting_jacobian():
    prob = ShootingProblem(_oscillator, 1.0, lambda u: np.array([1.0, 0.0]), lambda s0, sT: [sT[0]], 1)
    with pytest.raises(NonConvergenceError) as info:
        shoot(prob, [0.0])
    assert not info.value.result.converged


def test_shooting_rejects_wrong_guess_size():
    with pytest.raises(ValueError):
        shoot(_oscillator_bvp(0.5), [0.0, 1.0])


# --------------------------------------------------------------------------
# action oracle


def test_oracle_vanishes_on_free_particle_line():
    chart = tangent_bundle(1)
    prob = LagrangianProblem(chart, lagrangian_field(chart, "0.5*y1^2"))
    path = admissible_path(chart, lambda t: [0.7], None, [0.1], 1.0, 200)
    assert np.abs(oracle_action_gradient(prob, path)).max() < 1e-6


def test_oracle_is_minus_acceleration_for_free_particle():
    chart = tangent_bundle(1)
    prob = LagrangianProblem(chart, lagrangian_field(chart, "0.5*y1^2"))
    path = admissible_path(chart, lambda t: [t**2], None, [0.1], 1.0, 200)
    assert_allclose(oracle_action_gradient(prob, path)[:, 0], -2 * path.t[2:-2], atol=1e-6)


def test_oracle_on_second_order_cubic_and_quartic():
    chart = tangent_bundle(1)
    prob = SecondOrderProblem(chart, second_order_lagrangian(chart, "0.5*z1^2"))
    cubic = admissible_path(chart, lambda t: [1 - 3 * t**2], lambda t: [-6 * t], [0.1], 1.0, 200)
    assert np.abs(oracle_action_gradient(prob, cubic)).max() < 1e-5
    quartic = admissible_path(chart, lambda t: [t**3], lambda t: [3 * t**2], [0.1], 1.0, 200)
    assert_allclose(oracle_action_gradient(prob, quartic), 6.0, atol=1e-5)


def test_oracle_on_so3_rotation_is_euler_residual():
    chart = builtin_chart("so3")
    prob = LagrangianProblem(chart, lagrangian_field(chart, "0.5*(y1^2 + 2*y2^2 + 3*y3^2)"))
    path = admissible_path(chart, lambda t: [1.0, 0.0, 0.0], None, [], 1.0, 50)
    # a steady rotation about a principal axis is a relative equilibrium
    assert np.abs(oracle_action_gradient(prob, path)).max() < 1e-6


def test_oracle_input_checks():
    chart = tangent_bundle(1)
    path = admissible_path(chart, lambda t: [1.0], None, [0.0], 1.0, 20)
    with pytest.raises(TypeError):
        oracle_action_gradient(object(), path)
    prob = SecondOrderProblem(chart, second_order_lagrangian(chart, "0.5*z1^2"))
    with pytest.raises(ValueError, match="z samples"):
        oracle_action_gradient(prob, path)
