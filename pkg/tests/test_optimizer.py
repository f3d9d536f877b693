import numpy as np
import pytest

from crawlopt.crawler import CrawlerModel, build_model
from crawlopt.exceptions import NotOneLink
from crawlopt.optimizer import (SolverConfig, _Evaluator, bv_regularize,
                                estimate_gradient, optimize)
from crawlopt.stationarity import averaged_controls, one_link_process
from crawlopt.sweeping import ControlGrid, periodic_orbit
from crawlopt.transcription import (GaitProblem, crawler_cost, objective,
                                    project_controls)

SMALL = dict(starts=4, max_iters=20, polish_rounds=15, polish_candidates=32)


def one_link_problem(T=4.0, m=5, f2="zero", x0=None, tv_bound=None):
    model = CrawlerModel.one_link(0.0, 1.0, T)
    return GaitProblem.from_model(model, crawler_cost(model, f2), m, x0,
                                  tv_bound)


def chatter_gait(rng, N=64, T=4.0):
    """Bang-bang cycle with zero-mean noise added on the transit runs."""
    ref = one_link_process(0.0, 1.0, T)
    W = averaged_controls(ref, int(np.log2(N)))[:, 0]
    t = (np.arange(N) + 0.5) * T / N
    H = ref.breaks[1]
    transit = ((t > H + 0.1) & (t < H + 0.9)) | ((t > 2 * H + 1.1)
                                                 & (t < 2 * H + 1.9))
    noise = rng.uniform(-0.8, 0.8, size=N) * transit
    for mask in (transit & (t < 2 * H + 1), transit & (t > 2 * H + 1)):
        noise[mask] -= noise[mask].mean()
    return project_controls(W + noise, [1.0])


def test_gradient_of_quadratic():
    w = np.array([[0.3], [-1.2], [2.0]])
    g = estimate_gradient(lambda v: -0.5 * float(np.sum(v * v)), w)
    assert np.allclose(g, -w, atol=1e-6)


def test_gradient_of_linear():
    c = np.array([1.0, -2.0, 0.5])
    g = estimate_gradient(lambda v: float(c @ v), np.zeros(3))
    assert np.allclose(g, c, atol=1e-8)


def test_objective_flat_on_interior_gait():
    pb = one_link_problem(T=1.5, m=4, x0=[0.5])
    W = np.where(np.arange(16) < 8, 0.3, -0.3)[:, None]
    ev = _Evaluator(pb, SolverConfig(periodic_mode="fixed"))
    G = ev.gradient(W, np.array([0.5]), 1e-6)
    assert np.abs(G).max() <= 1e-9


def test_short_period_quadratic_is_idle():
    pb = one_link_problem(T=1.5, m=5, f2="quadratic")
    res = optimize(pb, SolverConfig(seed=1, **SMALL))
    assert res.J <= 1e-12
    assert res.J >= -1e-6
    assert np.abs(res.grid.values).max() <= 1e-3


def test_backward_model_is_idle():
    model = build_model(3, 1.0, 3.0, 1.0, 2.0, [1.0, 1.0])
    pb = GaitProblem.from_model(model, m=4)
    res = optimize(pb, SolverConfig(seed=0, **SMALL))
    assert res.J <= 1e-6


def test_one_link_small_mesh_finds_positive_gait():
    pb = one_link_problem(T=4.0, m=5)
    res = optimize(pb, SolverConfig(seed=0, **SMALL))
    assert res.J >= 0.9
    assert res.grid.is_feasible()
    assert len(res.start_values) == 4
    assert res.J == max(res.start_values)


def test_same_seed_same_history():
    pb = one_link_problem(T=3.0, m=4)
    cfg = SolverConfig(seed=7, **SMALL)
    assert optimize(pb, cfg).history_csv() == optimize(pb, cfg).history_csv()


def test_threads_do_not_change_result():
    pb = one_link_problem(T=3.0, m=4)
    a = optimize(pb, SolverConfig(seed=3, threads=1, **SMALL))
    b = optimize(pb, SolverConfig(seed=3, threads=3, **SMALL))
    assert a.history_csv() == b.history_csv()
    assert np.array_equal(a.grid.values, b.grid.values)


def test_tv_bound_is_kept():
    pb = one_link_problem(T=4.0, m=4, tv_bound=6.0)
    res = optimize(pb, SolverConfig(seed=0, tv_bound=6.0, **SMALL))
    assert res.grid.total_variation() <= 6.0 + 1e-10


def test_history_csv_columns():
    pb = one_link_problem(T=3.0, m=3)
    res = optimize(pb, SolverConfig(starts=2, max_iters=3, polish_rounds=2,
                                    polish_candidates=4))
    lines = res.history_csv().splitlines()
    assert lines[0] == "iter,start,J,step"
    assert len(lines) == 1 + len(res.history)


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        SolverConfig(starts=0)
    with pytest.raises(ValueError):
        SolverConfig(periodic_mode="loose")
    cfg = SolverConfig(starts=3, seed=9, tv_bound=4.0)
    assert SolverConfig.from_dict(cfg.to_dict()) == cfg


def test_regularize_keeps_bang_bang():
    pb = one_link_problem(T=4.0, m=6, x0=[1.0])
    W = averaged_controls(one_link_process(0.0, 1.0, 4.0), 6)
    grid = pb.grid(W)
    _, traj = objective(pb.polyhedron, pb.dynamics, pb.cost, grid, [1.0])
    out = bv_regularize(pb, grid, traj)
    assert np.array_equal(out.values, grid.values)


def test_regularize_chatter():
    rng = np.random.default_rng(11)
    pb = one_link_problem(T=4.0, m=6)
    pbq = one_link_problem(T=4.0, m=6, f2="quadratic")
    grid = pb.grid(chatter_gait(rng))
    traj, _ = periodic_orbit(pb.polyhedron, pb.dynamics, grid, [1.0])
    x0 = traj.states[0]
    out = bv_regularize(pb, grid, traj)
    J0, _ = objective(pb.polyhedron, pb.dynamics, pb.cost, grid, x0)
    J1, _ = objective(pb.polyhedron, pb.dynamics, pb.cost, out, x0)
    assert J1 == pytest.approx(J0, abs=1e-12)
    assert out.total_variation() < grid.total_variation()
    Q0, _ = objective(pbq.polyhedron, pbq.dynamics, pbq.cost, grid, x0)
    Q1, _ = objective(pbq.polyhedron, pbq.dynamics, pbq.cost, out, x0)
    assert Q1 > Q0


def test_regularize_needs_one_link():
    model = build_model(3, 1.0, 1.0, 3.0, 2.0, [1.0, 1.0])
    pb = GaitProblem.from_model(model, m=2)
    grid = ControlGrid(np.zeros((4, 2)), 2.0, [1.0, 1.0])
    traj, _ = periodic_orbit(model.C, model.dynamics, grid,
                             model.C.interior_point)
    with pytest.raises(NotOneLink):
        bv_regularize(pb, grid, traj)
