"""Scikit-learn style wrappers around simulation and gait optimization.

Rows of ``X`` are flattened control grids of shape ``(2**m * d,)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .crawler import CrawlerModel
from .optimizer import SolverConfig, optimize
from .sweeping import ControlGrid, periodic_orbit, simulate
from .transcription import GaitProblem, crawler_cost, objective


def check_controls(X, n_intervals, d):
    """Validate a batch of flattened control grids; returns ``(B, N, d)``."""
    X = check_array(X, ensure_2d=False, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != n_intervals * d:
        raise ValueError(f"expected {n_intervals * d} control values per row, "
                         f"got {X.shape[1]}")
    return X.reshape(X.shape[0], n_intervals, d)


def check_model(model):
    if not isinstance(model, CrawlerModel):
        raise TypeError("model must be a CrawlerModel")
    return model


class CatchingUpSimulator(BaseEstimator, TransformerMixin):
    """Map control grids to catching-up state sequences.

    With ``x0=None`` each row is started on its periodic orbit.
    """

    def __init__(self, model=None, m=8, x0=None):
        self.model = model
        self.m = m
        self.x0 = x0

    def fit(self, X=None, y=None):
        model = check_model(self.model)
        self.n_intervals_ = 2 ** int(self.m)
        self.d_ = model.dynamics.d
        if X is not None:
            check_controls(X, self.n_intervals_, self.d_)
        return self

    def _trajectories(self, X):
        check_is_fitted(self, "n_intervals_")
        model = self.model
        for W in check_controls(X, self.n_intervals_, self.d_):
            grid = ControlGrid(W, model.T, model.box)
            if self.x0 is None:
                traj, _ = periodic_orbit(model.C, model.dynamics, grid,
                                         model.C.interior_point)
            else:
                traj = simulate(model.C, model.dynamics, grid, self.x0)
            yield traj

    def transform(self, X):
        """Flattened states ``(B, (N + 1) * n)``."""
        return np.array([t.states.ravel() for t in self._trajectories(X)])

    def trajectories(self, X):
        return list(self._trajectories(X))


class GaitOptimizer(BaseEstimator):
    """Multistart gait search; ``fit`` ignores ``X`` and ``y``.

    After fitting, ``best_controls_`` holds the ``(N, d)`` control grid,
    ``best_x0_`` the periodic start state and ``best_value_`` the objective.
    ``predict`` evaluates the objective of given control rows.
    """

    def __init__(self, model=None, f2="zero", weight=1.0, m=8, starts=16,
                 seed=0, max_iters=60, step0=0.5, tv_bound=None,
                 periodic_mode="free", x0=None):
        self.model = model
        self.f2 = f2
        self.weight = weight
        self.m = m
        self.starts = starts
        self.seed = seed
        self.max_iters = max_iters
        self.step0 = step0
        self.tv_bound = tv_bound
        self.periodic_mode = periodic_mode
        self.x0 = x0

    def _problem(self):
        model = check_model(self.model)
        cost = crawler_cost(model, self.f2, self.weight)
        return GaitProblem.from_model(model, cost, int(self.m), self.x0,
                                      self.tv_bound)

    def _config(self):
        return SolverConfig(starts=self.starts, seed=self.seed,
                            max_iters=self.max_iters, step0=self.step0,
                            tv_bound=self.tv_bound,
                            periodic_mode=self.periodic_mode)

    def fit(self, X=None, y=None):
        self.problem_ = self._problem()
        result = optimize(self.problem_, self._config())
        self.best_controls_ = result.grid.values
        self.best_grid_ = result.grid
        self.best_x0_ = result.x0
        self.best_value_ = result.J
        self.history_ = result.history
        self.result_ = result
        return self

    def predict(self, X):
        check_is_fitted(self, "best_value_")
        pb = self.problem_
        out = []
        for W in check_controls(X, pb.N, pb.dynamics.d):
            grid = pb.grid(W)
            if self.periodic_mode == "free" or pb.x0 is None:
                traj, _ = periodic_orbit(pb.polyhedron, pb.dynamics, grid,
                                         pb.polyhedron.interior_point)
                x0 = traj.states[0]
            else:
                x0 = pb.x0
            out.append(objective(pb.polyhedron, pb.dynamics, pb.cost, grid,
                                 x0)[0])
        return np.array(out)

    def score(self, X=None, y=None):
        """Mean objective of ``X``, or the best value found when omitted."""
        check_is_fitted(self, "best_value_")
        if X is None:
            return float(self.best_value_)
        return float(np.mean(self.predict(X)))

    def trajectory(self):
        check_is_fitted(self, "best_value_")
        pb = self.problem_
        return simulate(pb.polyhedron, pb.dynamics, self.best_grid_,
                        self.best_x0_)
