"""Catching-up integration of controlled sweeping processes.

The inclusion ``x' in -N_C(x) + g(t, x, u)`` is discretized on the dyadic
mesh ``t_i = i T / 2**m`` by the projected explicit Euler step

    x_{i+1} = proj_C(x_i + h g(t_i, x_i, w_i)),

and the reaction ``xi_i = g(t_i, x_i, w_i) - (x_{i+1} - x_i) / h`` is kept
with every step. ``h * xi_i`` is exactly the normal-cone element produced by
the projection.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import DimensionMismatch, NoConvergence
from .polytope import DEFAULT_TOL, Polyhedron


@dataclass(frozen=True)
class Dynamics:
    """Right-hand side ``g`` with its Jacobians.

    ``batch`` is an optional vectorized version ``g(t, X, W)`` acting on
    row-stacked states and controls; the optimizer uses it for
    finite-difference sweeps.
    """

    g: Callable
    dxg: Callable
    dwg: Callable
    n: int
    d: int
    bound: float = np.inf
    lipschitz: float = 0.0
    batch: Optional[Callable] = None
    control_only: bool = False

    def __call__(self, t, x, w):
        return np.asarray(self.g(t, x, w), dtype=float)

    def evaluate_batch(self, t, X, W):
        if self.batch is not None:
            return self.batch(t, X, W)
        return np.array([self.g(t, x, w) for x, w in zip(X, W)])


def control_dynamics(n):
    """``g(t, x, u) = u`` (the crawler case)."""
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return Dynamics(
        g=lambda t, x, w: np.asarray(w, dtype=float),
        dxg=lambda t, x, w: zero,
        dwg=lambda t, x, w: eye,
        n=n, d=n, lipschitz=0.0,
        batch=lambda t, X, W: W,
        control_only=True,
    )


def affine_dynamics(A, B, b=None):
    """``g(t, x, u) = A x + B u + b(t)``; ``b`` may be a callable or vector."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, d = B.shape
    if b is None:
        b_fun = lambda t: np.zeros(n)  # noqa: E731
    elif callable(b):
        b_fun = b
    else:
        b_vec = np.asarray(b, dtype=float)
        b_fun = lambda t: b_vec  # noqa: E731
    return Dynamics(
        g=lambda t, x, w: A @ np.asarray(x, float) + B @ np.asarray(w, float)
        + b_fun(t),
        dxg=lambda t, x, w: A,
        dwg=lambda t, x, w: B,
        n=n, d=d,
        lipschitz=float(np.linalg.norm(A, 2)),
        batch=lambda t, X, W: X @ A.T + W @ B.T + b_fun(t),
    )


def check_dynamics(dyn, samples, eps=1e-6, rtol=1e-5):
    """Finite-difference check of ``dxg``/``dwg`` on ``(t, x, w)`` samples.

    Returns the worst relative error seen.
    """
    worst = 0.0
    for t, x, w in samples:
        x, w = np.asarray(x, float), np.asarray(w, float)
        for jac, var, which in ((dyn.dxg, x, 0), (dyn.dwg, w, 1)):
            J = np.asarray(jac(t, x, w), float)
            fd = np.zeros_like(J)
            for k in range(var.size):
                e = np.zeros_like(var)
                e[k] = eps
                if which == 0:
                    fd[:, k] = (dyn(t, x + e, w) - dyn(t, x - e, w)) / (2 * eps)
                else:
                    fd[:, k] = (dyn(t, x, w + e) - dyn(t, x, w - e)) / (2 * eps)
            scale = max(1.0, np.abs(J).max())
            worst = max(worst, float(np.abs(J - fd).max() / scale))
    return worst


@dataclass
class ControlGrid:
    """Piecewise-constant controls on ``2**m`` equal intervals of ``[0, T]``."""

    values: np.ndarray
    T: float
    box: np.ndarray
    zero_mean: bool = True
    tv_bound: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        self.values = v
        self.box = np.atleast_1d(np.asarray(self.box, dtype=float))
        if self.box.size == 1 and v.shape[1] > 1:
            self.box = np.full(v.shape[1], float(self.box[0]))
        count = v.shape[0]
        if count < 1 or count & (count - 1):
            raise ValueError(f"number of intervals {count} is not a power of 2")
        if self.box.size != v.shape[1]:
            raise DimensionMismatch(
                f"box has {self.box.size} bounds, controls have "
                f"{v.shape[1]} components")

    @property
    def m(self):
        return int(round(np.log2(self.values.shape[0])))

    @property
    def n_intervals(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def h(self):
        return self.T / self.n_intervals

    @property
    def times(self):
        return np.arange(self.n_intervals + 1) * self.h

    def total_variation(self):
        return total_variation(self.values)

    def violations(self):
        """Named constraint violations (all zero for a feasible grid)."""
        out = {"box": float(np.max(np.abs(self.values) - self.box, initial=0.0)
                            .clip(min=0.0))}
        out["zero_mean"] = (float(np.linalg.norm(self.values.sum(axis=0)))
                            if self.zero_mean else 0.0)
        out["tv"] = (max(0.0, self.total_variation() - self.tv_bound)
                     if self.tv_bound is not None else 0.0)
        return out

    def is_feasible(self, box_tol=1e-12, mean_tol=1e-10, tv_tol=1e-10):
        v = self.violations()
        return v["box"] <= box_tol and v["zero_mean"] <= mean_tol and \
            v["tv"] <= tv_tol

    def with_values(self, values, T=None):
        return ControlGrid(np.array(values, dtype=float), self.T if T is None
                           else T, self.box.copy(), self.zero_mean,
                           self.tv_bound)

    def refine(self, m):
        """Same piecewise-constant function on the finer mesh ``m``."""
        if m < self.m:
            raise ValueError("refine only goes to finer meshes")
        rep = 2 ** (m - self.m)
        return self.with_values(np.repeat(self.values, rep, axis=0))

    def to_dict(self):
        return {"T": self.T, "box": self.box.tolist(),
                "values": self.values.tolist(), "zero_mean": self.zero_mean,
                "tv_bound": self.tv_bound}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["values"], float), float(data["T"]),
                   np.asarray(data["box"], float),
                   bool(data.get("zero_mean", True)), data.get("tv_bound"))


def total_variation(values):
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(v, axis=0), axis=1)))


@dataclass
class DiscreteTrajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    velocities: np.ndarray
    reactions: np.ndarray
    positions: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def h(self):
        return float(self.times[1] - self.times[0])

    @property
    def n_intervals(self):
        return self.controls.shape[0]

    @property
    def periodicity_gap(self):
        return float(np.linalg.norm(self.states[-1] - self.states[0]))

    def to_csv(self):
        n = self.states.shape[1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = (["t"] + [f"x{k + 1}" for k in range(n)]
                  + [f"dx{k + 1}" for k in range(n)]
                  + [f"xi{k + 1}" for k in range(n)] + ["y"])
        writer.writerow(header)
        N = self.n_intervals
        for i in range(N + 1):
            if i < N:
                vel, rea = self.velocities[i], self.reactions[i]
            else:
                vel = rea = np.full(n, np.nan)
            y = self.positions[i] if self.positions is not None else np.nan
            row = [self.times[i], *self.states[i], *vel, *rea, y]
            writer.writerow([fmt(v) for v in row])
        return buf.getvalue()

    def to_dict(self):
        return {
            "t": self.times.tolist(),
            "x": self.states.tolist(),
            "u": self.controls.tolist(),
            "dx": self.velocities.tolist(),
            "xi": self.reactions.tolist(),
            "y": None if self.positions is None else self.positions.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())


def fmt(value):
    """Locale-independent 17-significant-digit formatting."""
    value = float(value)
    if np.isnan(value):
        return ""
    return f"{value:.17g}"


def step(P: Polyhedron, dyn: Dynamics, t, x, w, h):
    """One catching-up step; returns ``(x_next, reaction)``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    gv = dyn(t, x, np.atleast_1d(np.asarray(w, dtype=float)))
    x_next, _ = P.project(x + h * gv)
    return x_next, gv - (x_next - x) / h


def simulate(P: Polyhedron, dyn: Dynamics, grid: ControlGrid, x0,
             check=True) -> DiscreteTrajectory:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size != P.dim:
        raise DimensionMismatch(f"x0 has {x0.size} entries, polyhedron "
                                f"dimension is {P.dim}")
    if grid.d != dyn.d:
        raise DimensionMismatch(f"controls have {grid.d} components, "
                                f"dynamics expects {dyn.d}")
    if check:
        P.active_set(x0)  # raises PointOutside
    states = simulate_batch(P, dyn, grid.values[None], x0[None], grid.h)[0]
    return _trajectory(dyn, grid, states)


def _trajectory(dyn, grid, states):
    N, h = grid.n_intervals, grid.h
    times = grid.times
    vel = np.diff(states, axis=0) / h
    if dyn.control_only:
        gvals = grid.values
    else:
        gvals = np.array([dyn(times[i], states[i], grid.values[i])
                          for i in range(N)])
    return DiscreteTrajectory(times, states, grid.values.copy(), vel,
                              gvals - vel)


def simulate_batch(P: Polyhedron, dyn: Dynamics, W, X0, h):
    """Simulate a stack of control sequences.

    ``W`` has shape ``(B, N, d)`` and ``X0`` shape ``(B, n)``; returns the
    states with shape ``(B, N + 1, n)``.
    """
    W = np.asarray(W, dtype=float)
    X = np.array(X0, dtype=float, ndmin=2)
    B, N = W.shape[:2]
    out = np.empty((B, N + 1, X.shape[1]))
    out[:, 0] = X
    for i in range(N):
        t = i * h
        X = P.project_batch(X + h * dyn.evaluate_batch(t, X, W[:, i]))
        out[:, i + 1] = X
    return out


def periodic_orbit(P, dyn, grid, x0_guess, max_periods=200, tol=DEFAULT_TOL,
                   raise_on_failure=False):
    """Iterate the period map ``x0 -> x(T)`` until it closes up.

    Returns ``(trajectory, periods_used)``; ``trajectory.meta`` carries
    ``converged`` and ``gap``. With ``raise_on_failure`` a
    :class:`NoConvergence` is raised instead of flagging.
    """
    if grid.zero_mean and np.linalg.norm(grid.values.sum(axis=0)) > 1e-8:
        raise ValueError("periodic orbit requested for a non-zero-mean grid")
    x0 = np.atleast_1d(np.asarray(x0_guess, dtype=float))
    P.active_set(x0)
    traj = None
    for k in range(1, max_periods + 1):
        traj = simulate(P, dyn, grid, x0, check=False)
        gap = traj.periodicity_gap
        if gap <= tol:
            traj.meta.update(converged=True, gap=gap, periods=k)
            return traj, k
        x0 = traj.states[-1]
    traj.meta.update(converged=False, gap=gap, periods=max_periods)
    if raise_on_failure:
        raise NoConvergence(gap, max_periods)
    return traj, max_periods


def periodic_start_batch(P, dyn, W, X0, h, max_periods=200, tol=DEFAULT_TOL):
    """Vectorized period-map iteration; returns converged start states."""
    X = np.array(X0, dtype=float, ndmin=2)
    for _ in range(max_periods):
        S = simulate_batch(P, dyn, W, X, h)
        Xn = S[:, -1]
        if np.all(np.linalg.norm(Xn - X, axis=1) <= tol):
            return X
        X = Xn
    return X


def controls_to_json(grid: ControlGrid):
    return json.dumps(grid.to_dict())


def controls_from_json(text):
    return ControlGrid.from_dict(json.loads(text))
