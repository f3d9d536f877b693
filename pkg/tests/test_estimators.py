import numpy as np
import pytest
from sklearn.base import clone

from crawlopt.crawler import CrawlerModel, build_model
from crawlopt.estimators import CatchingUpSimulator, GaitOptimizer, \
    check_controls
from crawlopt.stationarity import averaged_controls, one_link_process


def test_check_controls_shapes():
    X = check_controls(np.zeros(8), 4, 2)
    assert X.shape == (1, 4, 2)
    with pytest.raises(ValueError):
        check_controls(np.zeros((2, 5)), 4, 1)


def test_simulator_transform():
    model = CrawlerModel.one_link(0.0, 1.0, 4.0)
    W = averaged_controls(one_link_process(0.0, 1.0, 4.0), 4).T
    sim = CatchingUpSimulator(model, m=4, x0=[1.0]).fit(W)
    S = sim.transform(W)
    assert S.shape == (1, 17)
    assert S[0, 0] == 1.0 and S[0, -1] == pytest.approx(1.0)


def test_simulator_periodic_mode():
    model = CrawlerModel.one_link(0.0, 1.0, 4.0)
    W = np.where(np.arange(16) < 8, 1.0, -1.0)[None]
    traj = CatchingUpSimulator(model, m=4).fit().trajectories(W)[0]
    assert traj.periodicity_gap <= 1e-9


def test_simulator_requires_model():
    with pytest.raises(TypeError):
        CatchingUpSimulator(None).fit()


def test_params_roundtrip():
    est = GaitOptimizer(m=5, starts=3, seed=4)
    params = est.get_params()
    assert params["m"] == 5 and params["starts"] == 3
    twin = clone(est)
    assert twin.get_params() == params


def test_gait_optimizer_fit_predict():
    model = CrawlerModel.one_link(0.0, 1.0, 4.0)
    est = GaitOptimizer(model, m=4, starts=3, max_iters=15).fit()
    assert est.best_controls_.shape == (16, 1)
    assert est.score() == est.best_value_
    pred = est.predict(est.best_controls_.reshape(1, -1))
    assert pred[0] == pytest.approx(est.best_value_, abs=1e-9)
    assert est.trajectory().n_intervals == 16


def test_gait_optimizer_backward_model():
    model = build_model(3, 1.0, 3.0, 1.0, 2.0, [1.0, 1.0])
    est = GaitOptimizer(model, m=3, starts=2, max_iters=10).fit()
    assert est.best_value_ <= 1e-6
