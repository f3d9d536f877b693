"""N-block crawler with anisotropic dry friction.

The friction polytope of the blocks is ``C0 = {X : -mu_minus <= X <= mu_plus}``.
In the shape space ``z = (X2 - X1, ..., XN - X(N-1))`` the reduced polyhedron
is ``C = {z : -mu_i^- <= <pi_Z(e_i), z> <= mu_i^+}``, and the net body
velocity produced by a shape reaction ``w`` is

    v_m(w) = pi_Y(X*)   with   X* = argmin {R(X) : pi_Z(X) = w},

``R(X) = sum mu_i^+ X_i^+ + mu_i^- X_i^-``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .exceptions import DegenerateFriction, DimensionMismatch, \
    UniquenessViolation
from .polytope import Polyhedron
from .sweeping import ControlGrid, DiscreteTrajectory, control_dynamics

COST_TIE_TOL = 1e-10


def shape_projection(N):
    """Matrix of ``pi_Z``: rows ``e_{i+1} - e_i``."""
    D = np.zeros((N - 1, N))
    for i in range(N - 1):
        D[i, i] = -1.0
        D[i, i + 1] = 1.0
    return D


def position_projection(N):
    return np.full(N, 1.0 / N)


def check_uniqueness(mu_plus, mu_minus, max_blocks=20):
    """Raise :class:`UniquenessViolation` if some subset balances friction."""
    mu_plus = np.asarray(mu_plus, float)
    mu_minus = np.asarray(mu_minus, float)
    N = mu_plus.size
    if N > max_blocks:
        raise ValueError(f"exhaustive uniqueness check limited to "
                         f"{max_blocks} blocks")
    total_minus = mu_minus.sum()
    scale = max(mu_plus.max(), mu_minus.max())
    for r in range(N + 1):
        for J in itertools.combinations(range(N), r):
            idx = list(J)
            val = mu_plus[idx].sum() - (total_minus - mu_minus[idx].sum())
            if abs(val) <= 1e-12 * scale:
                raise UniquenessViolation(J, val)


@dataclass
class VmDecomposition:
    lam: np.ndarray
    value: float
    anchor: np.ndarray


class CrawlerModel:
    """Crawler of ``N`` blocks; owns ``C0``, the reduced ``C`` and ``v_m``.

    Build with :func:`build_model`; use :meth:`one_link` for the abstract
    model ``C = [a, b]``, ``f1 = |.| / 2``, ``U = [-1, 1]``.
    """

    def __init__(self, N, k, mu_plus, mu_minus, T, box, *, polyhedron=None):
        self.N = int(N)
        self.k = float(k)
        self.mu_plus = np.asarray(mu_plus, float)
        self.mu_minus = np.asarray(mu_minus, float)
        self.T = float(T)
        self.box = np.atleast_1d(np.asarray(box, float))
        if self.box.size == 1 and self.N > 2:
            self.box = np.full(self.N - 1, float(self.box[0]))
        self.pi_Z = shape_projection(self.N)
        self.pi_Y = position_projection(self.N)
        self.C0 = Polyhedron.box(-self.mu_minus, self.mu_plus)
        self.C = polyhedron if polyhedron is not None else self._reduced()
        # W_i(w) = sum_{l < i} w_l as a linear map, one row per block
        self._cumsum = np.tril(np.ones((self.N, self.N - 1)), k=-1)

    @classmethod
    def one_link(cls, a, b, T):
        """Abstract one-link problem with ``v_m(w) = |w| / 2``."""
        if not b > a:
            raise ValueError("one-link interval needs a < b")
        model = cls(2, 1.0, [1.0, 2.0], [3.0, 4.0], T, [1.0],
                    polyhedron=Polyhedron.interval(a, b))
        model.one_link_bounds = (float(a), float(b))
        return model

    @property
    def is_one_link(self):
        return self.N == 2

    def _reduced(self):
        # <pi_Z(e_i), z> = z_{i-1} - z_i in shape coordinates
        V = self.pi_Z.T  # row i = pi_Z(e_i)
        normals = np.vstack([V, -V])
        offsets = np.concatenate([self.mu_plus, self.mu_minus])
        return Polyhedron(normals, offsets)

    @property
    def dynamics(self):
        return control_dynamics(self.N - 1)

    # -- v_m -------------------------------------------------------------
    def friction(self, X):
        X = np.asarray(X, float)
        return float(self.mu_plus @ np.maximum(X, 0)
                     + self.mu_minus @ np.maximum(-X, 0))

    def _lift(self, w):
        w = np.atleast_1d(np.asarray(w, float))
        if w.size != self.N - 1:
            raise DimensionMismatch(f"shape vector has {w.size} entries, "
                                    f"expected {self.N - 1}")
        return self._cumsum @ w

    def _breakpoint_costs(self, w):
        W = self._lift(w)
        cands = W[None, :] - W[:, None]  # row k: anchor X_k = 0
        costs = (np.maximum(cands, 0) @ self.mu_plus
                 + np.maximum(-cands, 0) @ self.mu_minus)
        return cands, costs

    def solve_lp(self, w):
        """Dissipation LP over split variables ``X = Xp - Xm``."""
        w = np.atleast_1d(np.asarray(w, float))
        N = self.N
        cost = np.concatenate([self.mu_plus, self.mu_minus])
        A_eq = np.hstack([self.pi_Z, -self.pi_Z])
        res = linprog(cost, A_eq=A_eq, b_eq=w, bounds=[(0, None)] * (2 * N),
                      method="highs")
        if res.status != 0:
            raise RuntimeError(f"v_m LP failed: {res.message}")
        return res.x[:N] - res.x[N:]

    def v_m(self, w):
        """Return ``(value, VmDecomposition)``.

        The LP vertex is polished onto its exact breakpoint: at an optimal
        basis some block is at rest, so ``X = W - W_k`` for that block ``k``.
        """
        w = np.atleast_1d(np.asarray(w, float))
        W = self._lift(w)
        if not np.any(w):
            X = np.zeros(self.N)
        else:
            X_lp = self.solve_lp(w)
            rest = np.abs(X_lp) <= 1e-7 * (1 + np.abs(X_lp).max())
            cands = [W - W[k] for k in np.flatnonzero(rest)]
            if not cands:
                cands = [W - W[int(np.argmin(np.abs(X_lp)))]]
            X = min(cands, key=lambda c: (self.friction(c),
                                          float(np.abs(c - X_lp).sum())))
        value = float(self.pi_Y @ X)
        lam = np.concatenate([np.maximum(X, 0), np.maximum(-X, 0)])
        return value, VmDecomposition(lam, value, X)

    def v_m_value(self, w):
        return self.v_m(w)[0]

    def v_m_batch(self, Wmat):
        """Vectorized ``v_m`` over rows via exact breakpoint search."""
        Wmat = np.atleast_2d(np.asarray(Wmat, float))
        lifts = Wmat @ self._cumsum.T  # (B, N)
        best = None
        best_cost = None
        for k in range(self.N):
            X = lifts - lifts[:, k:k + 1]
            cost = (np.maximum(X, 0) @ self.mu_plus
                    + np.maximum(-X, 0) @ self.mu_minus)
            if best is None:
                best, best_cost = X.mean(axis=1), cost
            else:
                better = cost < best_cost
                best = np.where(better, X.mean(axis=1), best)
                best_cost = np.minimum(cost, best_cost)
        return best

    def f1_subdifferential(self, w, tie_tol=COST_TIE_TOL):
        """Gradients of the linear pieces of ``v_m`` active at ``w``.

        Each optimal basis fixes a resting block ``k``; on that piece
        ``v_m(w) = mean(W) - W_k``.
        """
        _, costs = self._breakpoint_costs(w)
        best = costs.min()
        scale = max(1.0, abs(best))
        mean_grad = self.pi_Y @ self._cumsum  # gradient of mean(W)
        gens = []
        for k in np.flatnonzero(costs <= best + tie_tol * scale):
            g = mean_grad - self._cumsum[k]
            if not any(np.allclose(g, q, atol=1e-14) for q in gens):
                gens.append(g)
        return np.array(gens)

    # -- bookkeeping -----------------------------------------------------
    def lipschitz_bound(self):
        return float(max(self.mu_plus.max(), self.mu_minus.max()))

    def to_dict(self):
        if hasattr(self, "one_link_bounds"):
            a, b = self.one_link_bounds
            return {"one_link": {"a": a, "b": b, "T": self.T}}
        return {"N": self.N, "k": self.k, "mu_plus": self.mu_plus.tolist(),
                "mu_minus": self.mu_minus.tolist(), "T": self.T,
                "box": self.box.tolist()}

    def __repr__(self):
        if hasattr(self, "one_link_bounds"):
            return f"CrawlerModel.one_link{self.one_link_bounds + (self.T,)}"
        return (f"CrawlerModel(N={self.N}, mu_plus={self.mu_plus.tolist()}, "
                f"mu_minus={self.mu_minus.tolist()}, T={self.T})")


def build_model(N, k, mu_plus, mu_minus, T, box):
    mu_plus = np.atleast_1d(np.asarray(mu_plus, float))
    mu_minus = np.atleast_1d(np.asarray(mu_minus, float))
    if mu_plus.size == 1:
        mu_plus = np.full(N, mu_plus[0])
    if mu_minus.size == 1:
        mu_minus = np.full(N, mu_minus[0])
    if N < 2:
        raise ValueError("a crawler needs at least two blocks")
    if mu_plus.size != N or mu_minus.size != N:
        raise DimensionMismatch("friction arrays must have N entries")
    if np.any(mu_plus <= 0) or np.any(mu_minus <= 0):
        raise DegenerateFriction("friction coefficients must be positive")
    if k <= 0:
        raise DegenerateFriction("spring stiffness must be positive")
    if T <= 0:
        raise ValueError("period must be positive")
    box = np.atleast_1d(np.asarray(box, float))
    if np.any(box <= 0):
        raise ValueError("control box half-widths must be positive")
    check_uniqueness(mu_plus, mu_minus)
    return CrawlerModel(N, k, mu_plus, mu_minus, T, box)


def model_from_dict(data):
    if "one_link" in data:
        ol = data["one_link"]
        return CrawlerModel.one_link(float(ol["a"]), float(ol["b"]),
                                     float(ol["T"]))
    return build_model(int(data["N"]), float(data.get("k", 1.0)),
                       data["mu_plus"], data["mu_minus"], float(data["T"]),
                       data.get("box", [1.0]))


def model_from_json(text):
    return model_from_dict(json.loads(text))


def recover_position(model: CrawlerModel, traj: DiscreteTrajectory, y0=0.0):
    """Body positions ``y_{i+1} = y_i + h v_m(xi_i)``."""
    if traj.reactions.shape[1] != model.N - 1:
        raise DimensionMismatch("trajectory does not match the model's "
                                "shape dimension")
    h = traj.h
    rates = model.v_m_batch(traj.reactions)
    y = np.empty(traj.n_intervals + 1)
    y[0] = y0
    y[1:] = y0 + h * np.cumsum(rates)
    traj.positions = y
    return y


def friction_regime(mu_plus, mu_minus):
    """Homogeneous three-block regime: 'forward', 'backward' or 'mixed'."""
    if mu_minus > 2 * mu_plus:
        return "forward"
    if mu_plus > 2 * mu_minus:
        return "backward"
    return "mixed"


def spring_lengths(model: CrawlerModel, grid: ControlGrid, L0):
    """Spring lengths at the mesh nodes, ``L(t) = L(0) + int u / k``.

    ``L0`` holds the ``N - 1`` initial lengths; they are not derivable from
    the shape state and must be supplied.
    """
    L0 = np.atleast_1d(np.asarray(L0, float))
    if L0.size != model.N - 1 or grid.d != model.N - 1:
        raise DimensionMismatch("need one initial length and one control "
                                "component per spring")
    inc = np.cumsum(grid.values * grid.h, axis=0) / model.k
    return np.vstack([L0, L0 + inc])
