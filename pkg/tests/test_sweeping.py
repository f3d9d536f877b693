import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crawlopt import Polyhedron
from crawlopt.exceptions import DimensionMismatch, NoConvergence, PointOutside
from crawlopt.sweeping import (ControlGrid, affine_dynamics, check_dynamics,
                               control_dynamics, controls_from_json,
                               controls_to_json, periodic_orbit,
                               periodic_start_batch, simulate, simulate_batch,
                               step, total_variation)

from oracles import clip_period, euler_decay

UNIT = Polyhedron.interval(0, 1)
G1 = control_dynamics(1)


def square_wave(N, amp=1.0):
    t = (np.arange(N) + 0.5) / N
    return np.where(t < 0.5, amp, -amp)


def test_step_free_motion():
    x, xi = step(UNIT, G1, 0.0, [0.5], [1.0], 0.1)
    assert x[0] == pytest.approx(0.6)
    assert xi[0] == pytest.approx(0.0, abs=1e-12)


def test_step_pinned_at_face():
    x, xi = step(UNIT, G1, 0.0, [1.0], [1.0], 0.1)
    assert x[0] == 1.0
    assert xi[0] == pytest.approx(1.0)


def test_step_arriving_at_face():
    x, xi = step(UNIT, G1, 0.0, [0.95], [1.0], 0.1)
    assert x[0] == 1.0
    assert xi[0] == pytest.approx(0.5)


def test_step_rejects_nonpositive_h():
    with pytest.raises(ValueError):
        step(UNIT, G1, 0.0, [0.5], [1.0], 0.0)


def test_zero_control_is_constant():
    grid = ControlGrid(np.zeros(16), 2.0, [1.0])
    traj = simulate(UNIT, G1, grid, [0.3])
    assert np.all(traj.states == 0.3)
    assert np.all(traj.reactions == 0.0)


def test_ramp_to_face():
    grid = ControlGrid(np.ones(64), 2.0, [1.0], zero_mean=False)
    traj = simulate(UNIT, G1, grid, [0.0])
    assert traj.states[32, 0] == pytest.approx(1.0)
    assert np.all(traj.states[32:, 0] == 1.0)
    assert np.sum(traj.h * traj.reactions) == pytest.approx(1.0)


def test_affine_decay_matches_euler():
    P = Polyhedron.interval(-1e6, 1e6)
    dyn = affine_dynamics([[-1.0]], [[0.0]])
    grid = ControlGrid(np.zeros(32), 1.0, [1.0])
    traj = simulate(P, dyn, grid, [1.0])
    assert np.allclose(traj.states[:, 0], euler_decay(1.0, grid.h, 32),
                       rtol=1e-13)


def test_start_outside_raises():
    grid = ControlGrid(np.zeros(4), 1.0, [1.0])
    with pytest.raises(PointOutside):
        simulate(UNIT, G1, grid, [2.0])


def test_dimension_mismatch():
    grid = ControlGrid(np.zeros((4, 2)), 1.0, [1.0, 1.0])
    with pytest.raises(DimensionMismatch):
        simulate(UNIT, G1, grid, [0.5])


def test_grid_requires_power_of_two():
    with pytest.raises(ValueError):
        ControlGrid(np.zeros(6), 1.0, [1.0])


def test_periodic_orbit_zero_control():
    grid = ControlGrid(np.zeros(8), 1.0, [1.0])
    traj, k = periodic_orbit(UNIT, G1, grid, [0.4])
    assert k == 1
    assert traj.states[0, 0] == 0.4


def test_periodic_orbit_square_wave():
    grid = ControlGrid(square_wave(256), 4.0, [1.0])
    traj, k = periodic_orbit(UNIT, G1, grid, [0.5])
    assert k <= 2
    assert traj.periodicity_gap <= 1e-9


def test_short_period_reactions_vanish():
    # the state cannot cross [0, 1] in half of T = 1.5
    grid = ControlGrid(square_wave(64), 1.5, [1.0])
    traj, _ = periodic_orbit(UNIT, G1, grid, [0.5])
    assert np.all(np.abs(traj.reactions) <= 1e-12)


def test_periodic_orbit_rejects_nonzero_mean():
    with pytest.raises(ValueError):
        periodic_orbit(UNIT, G1, ControlGrid(np.ones(4), 1.0, [1.0]), [0.5])


def test_periodic_orbit_flags_and_raises():
    # a quarter unit of drift per period needs four periods to pin at 1
    grid = ControlGrid(np.ones(8), 0.25, [1.0], zero_mean=False)
    traj, k = periodic_orbit(UNIT, G1, grid, [0.0], max_periods=2)
    assert k == 2 and not traj.meta["converged"]
    with pytest.raises(NoConvergence):
        periodic_orbit(UNIT, G1, grid, [0.0], max_periods=2,
                       raise_on_failure=True)
    _, k = periodic_orbit(UNIT, G1, grid, [0.0])
    assert k == 5


def test_periodic_start_batch_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    W = rng.uniform(-1, 1, size=(5, 32, 1))
    W -= W.mean(axis=1, keepdims=True)
    X0 = periodic_start_batch(UNIT, G1, W, np.full((5, 1), 0.5), 4.0 / 32)
    for w, x0 in zip(W[:, :, 0], X0[:, 0]):
        xT, _ = clip_period(w, 4.0 / 32, 0.0, 1.0, x0)
        assert xT == pytest.approx(x0, abs=1e-9)


def test_simulate_batch_matches_clip_oracle():
    rng = np.random.default_rng(4)
    W = rng.uniform(-1, 1, size=(6, 16, 1))
    S = simulate_batch(UNIT, G1, W, np.full((6, 1), 0.2), 0.3)
    for w, s in zip(W[:, :, 0], S[:, :, 0]):
        xT, _ = clip_period(w, 0.3, 0.0, 1.0, 0.2)
        assert s[-1] == pytest.approx(xT, abs=1e-14)


def test_check_dynamics_affine():
    dyn = affine_dynamics([[0.0, 1.0], [-1.0, 0.0]], np.eye(2))
    samples = [(0.0, np.ones(2), np.zeros(2)), (1.0, [0.3, -2.0], [1.0, 0.5])]
    assert check_dynamics(dyn, samples) <= 1e-5


def test_grid_feasibility_and_tv():
    grid = ControlGrid([1.0, -1.0, 1.0, -1.0], 1.0, [1.0], tv_bound=5.0)
    assert grid.total_variation() == pytest.approx(6.0)
    assert not grid.is_feasible()
    assert grid.with_values([1.0, 1.0, -1.0, -1.0]).is_feasible()
    assert total_variation(np.array([[0.0], [2.0], [2.0]])) == 2.0


def test_grid_refine_and_json():
    grid = ControlGrid([0.5, -0.5], 2.0, [1.0])
    fine = grid.refine(3)
    assert fine.n_intervals == 8
    assert np.all(fine.values[:4] == 0.5)
    back = controls_from_json(controls_to_json(fine))
    assert np.array_equal(back.values, fine.values)
    assert back.T == 2.0


def test_trajectory_csv_has_all_nodes():
    grid = ControlGrid(square_wave(8), 1.0, [1.0])
    traj = simulate(UNIT, G1, grid, [0.5])
    lines = traj.to_csv().strip().splitlines()
    assert len(lines) == 1 + 9


def test_asymptotic_orthogonality_decreases():
    P = Polyhedron.interval(0.0, 0.6)

    def orth(m):
        N = 2 ** m
        t = (np.arange(N) + 0.5) / N * 4.0
        grid = ControlGrid(np.cos(np.pi * t / 2), 4.0, [1.0])
        traj, _ = periodic_orbit(P, G1, grid, [0.3])
        return float(np.sum(traj.h * np.abs(traj.reactions * traj.velocities)))

    vals = [orth(m) for m in range(5, 10)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_mesh_convergence_is_monotone():
    P = Polyhedron.interval(0.0, 0.6)

    def states(m):
        N = 2 ** m
        t = (np.arange(N) + 0.5) / N * 4.0
        grid = ControlGrid(np.sin(np.pi * t / 2), 4.0, [1.0])
        return simulate(P, G1, grid, [0.3]).states[:, 0]

    runs = [states(m) for m in range(4, 10)]
    gaps = [np.abs(fine[::2] - coarse).max()
            for coarse, fine in zip(runs, runs[1:])]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), m=st.integers(2, 6))
def test_reactions_lie_in_normal_cone(seed, m):
    rng = np.random.default_rng(seed)
    P = Polyhedron.box([0, 0], [1, 0.5])
    grid = ControlGrid(rng.uniform(-1, 1, size=(2 ** m, 2)), 1.0, [1.0, 1.0],
                       zero_mean=False)
    traj = simulate(P, control_dynamics(2), grid, rng.uniform(0, 0.5, size=2))
    for i in range(grid.n_intervals):
        x_next = traj.states[i + 1]
        assert P.contains(x_next)
        dec = P.normal_cone_coeffs(x_next, traj.h * traj.reactions[i])
        assert dec.feasible and dec.residual <= 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), m=st.integers(2, 6))
def test_zero_mean_periodic_run_closes(seed, m):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-1, 1, size=2 ** m)
    w -= w.mean()
    grid = ControlGrid(w, 3.0, [1.0])
    traj, _ = periodic_orbit(UNIT, G1, grid, [0.5])
    if traj.meta["converged"]:
        assert traj.periodicity_gap <= 1e-9
