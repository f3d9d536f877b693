"""Discrete objective, control-constraint projection and the anchored
verification problem built around a reference process.

Two regimes are supported. In the optimization regime the objective is the
left-endpoint Riemann sum

    J_m = h * sum_i ( f1(g(t_i, x_i, w_i) - Delta_i) - f2(t_i, w_i) )

along a catching-up trajectory. In the verification regime a reference
process ``(xbar, ubar)`` is given and :class:`AnchoredProblem` adds the
proximal penalty with weight ``kappa_m = 1 / sqrt(alpha_m)``, shifted face
offsets and the averaged reference reaction.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .exceptions import InfeasibleConstraints, LocalityViolated, \
    ReferenceInfeasible
from .polytope import DEFAULT_TOL, Polyhedron
from .sweeping import ControlGrid, DiscreteTrajectory, Dynamics, \
    simulate, simulate_batch, total_variation

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-16


# ---------------------------------------------------------------------------
# cost specification
# ---------------------------------------------------------------------------
@dataclass
class CostSpec:
    """Integrand pieces ``f1`` (reaction reward) and ``f2`` (control cost).

    ``f1_batch`` maps an ``(B, n)`` array of reactions to ``(B,)`` values and
    ``f1_subdiff`` returns generator vectors of the subdifferential at a
    reaction. ``f2`` is ``'zero'``, ``'quadratic'`` (``weight/2 |u|^2``) or
    ``'custom'`` with ``f2_fun(t, u)`` and ``f2_grad(t, u)``.
    """

    f1_batch: Callable
    f1_subdiff: Callable
    f2_kind: str = "zero"
    weight: float = 1.0
    f2_fun: Optional[Callable] = None
    f2_grad: Optional[Callable] = None

    def f1(self, v):
        return float(self.f1_batch(np.atleast_2d(np.asarray(v, float)))[0])

    def f2(self, t, u):
        u = np.asarray(u, float)
        if self.f2_kind == "zero":
            return 0.0
        if self.f2_kind == "quadratic":
            return 0.5 * self.weight * float(u @ u)
        return float(self.f2_fun(t, u))

    def f2_batch(self, t, U):
        U = np.atleast_2d(U)
        if self.f2_kind == "zero":
            return np.zeros(U.shape[0])
        if self.f2_kind == "quadratic":
            return 0.5 * self.weight * np.sum(U * U, axis=1)
        return np.array([self.f2_fun(t, u) for u in U])

    def df2(self, t, u):
        u = np.asarray(u, float)
        if self.f2_kind == "zero":
            return np.zeros_like(u)
        if self.f2_kind == "quadratic":
            return self.weight * u
        return np.asarray(self.f2_grad(t, u), float)

    def with_f2(self, kind, weight=1.0):
        return CostSpec(self.f1_batch, self.f1_subdiff, kind, weight,
                        self.f2_fun, self.f2_grad)

    def to_dict(self):
        return {"f2": {"kind": self.f2_kind, "weight": self.weight}}


def crawler_cost(model, f2="zero", weight=1.0):
    return CostSpec(model.v_m_batch, model.f1_subdifferential, f2, weight)


def half_abs_cost(f2="zero", weight=1.0):
    """``f1(v) = |v| / 2`` in one dimension."""
    def batch(V):
        return 0.5 * np.abs(np.asarray(V, float)[:, 0])

    def subdiff(v):
        v = float(np.atleast_1d(v)[0])
        if abs(v) <= 1e-10:
            return np.array([[-0.5], [0.5]])
        return np.array([[0.5 * np.sign(v)]])
    return CostSpec(batch, subdiff, f2, weight)


def cost_from_dict(data, f1_source):
    f2_data = data.get("f2", {"kind": "zero"})
    kind = f2_data.get("kind", "zero")
    if kind not in ("zero", "quadratic"):
        raise ValueError(f"unknown f2 kind {kind!r}")
    return crawler_cost(f1_source, kind, float(f2_data.get("weight", 1.0)))


def check_cost(cost, dim, rng=None, samples=20, eps=1e-6):
    """Spot checks: ``f1(0) = 0``, degree-1 homogeneity, ``f2`` gradient."""
    rng = np.random.default_rng(rng)
    report = {"f1_zero": abs(cost.f1(np.zeros(dim))), "homogeneity": 0.0,
              "f2_grad": 0.0}
    for _ in range(samples):
        v = rng.normal(size=dim)
        c = rng.uniform(0.1, 5.0)
        report["homogeneity"] = max(report["homogeneity"],
                                    abs(cost.f1(c * v) - c * cost.f1(v)))
        u = rng.normal(size=dim)
        fd = np.array([(cost.f2(0.0, u + eps * e) - cost.f2(0.0, u - eps * e))
                       / (2 * eps) for e in np.eye(dim)])
        report["f2_grad"] = max(report["f2_grad"],
                                float(np.abs(fd - cost.df2(0.0, u)).max()))
    return report


# ---------------------------------------------------------------------------
# optimization regime
# ---------------------------------------------------------------------------
def running_reward(cost, grid, traj):
    h = grid.h
    r1 = cost.f1_batch(traj.reactions)
    r2 = np.array([cost.f2(t, w) for t, w in zip(grid.times[:-1],
                                                 grid.values)])
    return h * (r1 - r2)


def objective(P, dyn, cost, grid, x0):
    """Return ``(J, trajectory)`` for the catching-up process from ``x0``."""
    traj = simulate(P, dyn, grid, x0)
    J = float(np.sum(running_reward(cost, grid, traj)))
    traj.meta["J"] = J
    return J, traj


def objective_batch(P, dyn, cost, W, X0, T):
    """Vectorized objective for stacked control sequences ``W (B, N, d)``."""
    W = np.asarray(W, float)
    B, N, d = W.shape
    h = T / N
    S = simulate_batch(P, dyn, W, X0, h)
    vel = np.diff(S, axis=1) / h
    if dyn.control_only:
        G = W
    else:
        G = np.stack([dyn.evaluate_batch(i * h, S[:, i], W[:, i])
                      for i in range(N)], axis=1)
    xi = (G - vel).reshape(B * N, -1)
    r1 = cost.f1_batch(xi).reshape(B, N)
    if cost.f2_kind == "zero":
        r2 = 0.0
    elif cost.f2_kind == "quadratic":
        r2 = 0.5 * cost.weight * np.sum(W * W, axis=2)
    else:
        r2 = np.array([[cost.f2(i * h, W[b, i]) for i in range(N)]
                       for b in range(B)])
    return h * np.sum(r1 - r2, axis=1), S


# ---------------------------------------------------------------------------
# control projection
# ---------------------------------------------------------------------------
def _project_box_mean_1d(v, a):
    """Exact projection of ``v`` onto ``{|w_i| <= a, sum w = 0}``."""
    v = np.asarray(v, float)
    # sum(clip(v - tau, -a, a)) is nonincreasing and piecewise linear in tau
    knots = np.unique(np.concatenate([v - a, v + a]))
    vals = np.clip(v[None, :] - knots[:, None], -a, a).sum(axis=1)
    if vals[0] < 0 or vals[-1] > 0:  # cannot happen for a > 0
        raise InfeasibleConstraints("zero-mean box projection failed")
    k = int(np.searchsorted(-vals, 0.0))
    if k < len(knots) and vals[k] == 0.0:
        tau = knots[k]
    else:
        t0, t1 = knots[k - 1], knots[k]
        f0, f1 = vals[k - 1], vals[k]
        tau = t0 + (t1 - t0) * f0 / (f0 - f1)
    w = np.clip(v - tau, -a, a)
    # remove round-off drift on interior entries
    free = np.abs(w) < a
    if free.any():
        w[free] -= w.sum() / free.sum()
    return w


def tv_prox_1d(v, theta):
    """``argmin 1/2 |w - v|^2 + theta * sum |w_{i+1} - w_i|`` via its dual."""
    v = np.asarray(v, float)
    n = v.size
    if n < 2 or theta <= 0:
        return v.copy()
    Dt = np.zeros((n, n - 1))
    idx = np.arange(n - 1)
    Dt[idx, idx] = -1.0
    Dt[idx + 1, idx] = 1.0
    res = lsq_linear(Dt, v, bounds=(-theta, theta), method="bvls",
                     tol=1e-14)
    return v - Dt @ res.x


def project_controls(values, box, zero_mean=True, tv_bound=None):
    """Project control values onto box, zero-mean and optional TV sets.

    Without a TV bound the result is the exact Euclidean projection. With
    one, a TV-prox pass (which keeps sums and ranges) is tightened by
    bisection until the bound holds.
    """
    V = np.array(values, dtype=float)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    box = np.broadcast_to(np.atleast_1d(np.asarray(box, float)),
                          (V.shape[1],))
    if zero_mean and np.any(box <= 0):
        raise InfeasibleConstraints("zero must lie in the interior of U")
    out = np.empty_like(V)
    for ell in range(V.shape[1]):
        if zero_mean:
            out[:, ell] = _project_box_mean_1d(V[:, ell], box[ell])
        else:
            out[:, ell] = np.clip(V[:, ell], -box[ell], box[ell])
    if tv_bound is not None and total_variation(out) > tv_bound:
        out = _enforce_tv(out, box, zero_mean, float(tv_bound))
    return out[:, 0] if squeeze else out


def _enforce_tv(W, box, zero_mean, K):
    d = W.shape[1]

    def prox_all(theta):
        Z = np.column_stack([tv_prox_1d(W[:, ell], theta)
                             for ell in range(d)])
        for ell in range(d):
            Z[:, ell] = np.clip(Z[:, ell], -box[ell], box[ell])
            if zero_mean:
                Z[:, ell] -= Z[:, ell].mean()
        return Z

    lo, hi = 0.0, max(1.0, float(np.abs(W).max()) * W.shape[0])
    Z = prox_all(hi)
    if total_variation(Z) > K:
        return np.zeros_like(W) if zero_mean else np.full_like(W, W.mean(0))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if total_variation(prox_all(mid)) > K:
            lo = mid
        else:
            hi = mid
    Z = prox_all(hi)
    if zero_mean:
        for ell in range(d):
            Z[:, ell] = _project_box_mean_1d(Z[:, ell], box[ell]) \
                if np.abs(Z[:, ell]).max() > box[ell] else Z[:, ell]
    return Z


# ---------------------------------------------------------------------------
# reference processes
# ---------------------------------------------------------------------------
@dataclass
class ReferenceProcess:
    """Piecewise-constant control and piecewise-affine state on breakpoints.

    ``states[k]`` is the state at ``breaks[k]``; ``controls[k]`` acts on
    ``[breaks[k], breaks[k+1])``.
    """

    breaks: np.ndarray
    controls: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.breaks = np.asarray(self.breaks, float)
        self.controls = np.atleast_2d(np.asarray(self.controls, float))
        if self.controls.shape[0] == 1 and len(self.breaks) > 2:
            self.controls = self.controls.T
        self.states = np.asarray(self.states, float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]

    @classmethod
    def from_grid(cls, grid, traj):
        return cls(grid.times, grid.values, traj.states)

    @property
    def T(self):
        return float(self.breaks[-1])

    @property
    def velocities(self):
        return np.diff(self.states, axis=0) / np.diff(self.breaks)[:, None]

    def x_at(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        return np.column_stack([np.interp(t, self.breaks, self.states[:, k])
                                for k in range(self.states.shape[1])])

    def pieces(self, s0, s1):
        """Overlaps ``(a, b, k)`` of ``[s0, s1]`` with reference piece ``k``."""
        out = []
        k0 = max(int(np.searchsorted(self.breaks, s0, side="right")) - 1, 0)
        for k in range(k0, len(self.breaks) - 1):
            a, b = max(s0, self.breaks[k]), min(s1, self.breaks[k + 1])
            if self.breaks[k] >= s1:
                break
            if b > a:
                out.append((a, b, k))
        return out


def mesh_averages(ref: ReferenceProcess, dyn: Dynamics, m):
    """Interval data of a reference on the mesh ``t_i = i T / 2**m``.

    Returns a dict with averaged control ``u_m``, averaged velocity
    ``xdot_avg``, the within-interval variances of both, averaged reaction
    ``zeta`` and the residual vectors ``r_vec`` of the forward relation.
    """
    N = 2 ** m
    T = ref.T
    h = T / N
    vel = ref.velocities
    n, d = ref.states.shape[1], ref.controls.shape[1]
    u_m = np.zeros((N, d))
    xd = np.zeros((N, n))
    var_u = np.zeros(N)
    var_x = np.zeros(N)
    g_avg = np.zeros((N, n))
    nodes = ref.x_at(np.arange(N + 1) * h)
    for i in range(N):
        s0, s1 = i * h, (i + 1) * h
        parts = ref.pieces(s0, s1)
        for a, b, k in parts:
            wgt = (b - a) / h
            u_m[i] += wgt * ref.controls[k]
            xd[i] += wgt * vel[k]
            tm = 0.5 * (a + b)
            # midpoint rule: exact for g affine in (t, x)
            g_avg[i] += wgt * dyn(tm, ref.x_at(tm)[0], ref.controls[k])
        for a, b, k in parts:
            var_u[i] += (b - a) * np.sum((ref.controls[k] - u_m[i]) ** 2)
            var_x[i] += (b - a) * np.sum((vel[k] - xd[i]) ** 2)
    g_node = np.array([dyn(i * h, nodes[i], u_m[i]) for i in range(N)])
    return {"u_m": u_m, "xdot_avg": xd, "var_u": var_u, "var_x": var_x,
            "zeta": g_avg - xd, "r_vec": g_avg - g_node, "nodes": nodes,
            "h": h}


@dataclass
class AnchoredProblem:
    """Reference-anchored discrete problem on mesh ``m``."""

    m: int
    T: float
    polyhedron: Polyhedron
    dynamics: Dynamics
    cost: CostSpec
    box: np.ndarray
    reference: ReferenceProcess
    x_nodes: np.ndarray      # xbar(t_i), i = 0..N
    u_avg: np.ndarray        # u_m
    xdot_avg: np.ndarray
    var_x: np.ndarray
    var_u: np.ndarray
    zeta: np.ndarray         # averaged reference reaction per interval
    r_bar: np.ndarray        # averaged perturbation radius per interval
    rho_ref: np.ndarray      # unit directions realizing the reference
    c_shift: np.ndarray      # (N, sigma) shifted offsets
    alpha: float
    kappa: float
    eps_bar: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return 2 ** self.m

    @property
    def h(self):
        return self.T / self.N

    def shifted_polyhedron(self, i):
        return _ShiftedPolyhedron(self.polyhedron, self.c_shift[i % self.N])

    def penalty(self, z0, Delta, W):
        """Proximal term (without the ``kappa/2`` factor)."""
        h = self.h
        z0 = np.atleast_1d(z0)
        pen = float(np.sum((z0 - self.x_nodes[0]) ** 2))
        pen += h * float(np.sum((Delta - self.xdot_avg) ** 2)) \
            + float(self.var_x.sum())
        pen += h * float(np.sum((W - self.u_avg) ** 2)) \
            + float(self.var_u.sum())
        return pen


class _ShiftedPolyhedron:
    """Same normals, offsets replaced; projection by the active-set QP."""

    def __init__(self, base, offsets):
        self._base = base
        self.normals = base.normals
        self.offsets = np.asarray(offsets, float)

    def project(self, y):
        y = np.asarray(y, float)
        if np.all(self.normals @ y <= self.offsets):
            return y.copy()
        if self._base.dim == 1:
            a = self.normals[:, 0]
            hi = np.min(self.offsets[a > 0] / a[a > 0], initial=np.inf)
            lo = np.max(self.offsets[a < 0] / a[a < 0], initial=-np.inf)
            return np.clip(y, lo, hi)
        shift = Polyhedron(self.normals, self.offsets)
        return shift.project(y)[0]


def build_anchored(reference: ReferenceProcess, P: Polyhedron, dyn: Dynamics,
                   cost: CostSpec, box, m, eps_bar=0.5, tol=DEFAULT_TOL):
    """Assemble the anchored problem around ``reference`` on mesh ``m``."""
    T = reference.T
    data = mesh_averages(reference, dyn, m)
    N, h = 2 ** m, data["h"]
    nodes = data["nodes"]
    slack_nodes = np.array([P.slack(x) for x in reference.states])
    if slack_nodes.min() < -1e-8:
        raise ReferenceInfeasible(
            f"reference leaves the polyhedron by {-slack_nodes.min():.3e}")
    box = np.atleast_1d(np.asarray(box, float))
    if np.abs(reference.controls).max() > box.max() + 1e-12:
        raise ReferenceInfeasible("reference control leaves U")
    # shifted offsets: face value at t_i when touched on [t_i, t_{i+1})
    A, c = P.normals, P.offsets
    c_shift = np.tile(c, (N, 1))
    for i in range(N):
        s0, s1 = i * h, (i + 1) * h
        inner = reference.breaks[(reference.breaks > s0)
                                 & (reference.breaks < s1)]
        probe = np.vstack([nodes[i:i + 1], reference.x_at(inner)]) \
            if inner.size else nodes[i:i + 1]
        touched = np.any(probe @ A.T >= c - tol, axis=0)
        c_shift[i, touched] = A[touched] @ nodes[i]
    alpha = h * float(np.sum((data["xdot_avg"]
                              - np.diff(nodes, axis=0) / h) ** 2)) \
        + float(data["var_x"].sum()) + float(data["var_u"].sum())
    kappa = 1.0 / np.sqrt(max(alpha, ALPHA_FLOOR))
    r_norm = np.linalg.norm(data["r_vec"], axis=1)
    rho = np.zeros_like(data["r_vec"])
    nz = r_norm > 0
    rho[nz] = data["r_vec"][nz] / r_norm[nz, None]
    return AnchoredProblem(m=m, T=T, polyhedron=P, dynamics=dyn, cost=cost,
                           box=box, reference=reference, x_nodes=nodes,
                           u_avg=data["u_m"], xdot_avg=data["xdot_avg"],
                           var_x=data["var_x"], var_u=data["var_u"],
                           zeta=data["zeta"], r_bar=r_norm, rho_ref=rho,
                           c_shift=c_shift, alpha=alpha, kappa=kappa,
                           eps_bar=eps_bar)


def anchored_states(pm: AnchoredProblem, x0, W, rho=None,
                    dynamics="catching_up"):
    """States of the anchored problem for ``(x0, W)``.

    ``'catching_up'`` projects onto the shifted polyhedra; ``'prescribed'``
    uses the averaged reference reaction plus the slack ``rho * r_bar``.
    """
    W = np.asarray(W, float).reshape(pm.N, -1)
    h = pm.h
    z = np.empty((pm.N + 1, pm.polyhedron.dim))
    z[0] = np.atleast_1d(x0)
    rho = pm.rho_ref if rho is None else np.asarray(rho, float)
    for i in range(pm.N):
        gv = pm.dynamics(i * h, z[i], W[i])
        if dynamics == "prescribed":
            z[i + 1] = z[i] + h * (-pm.zeta[i] + gv + rho[i] * pm.r_bar[i])
        else:
            z[i + 1] = pm.shifted_polyhedron(i + 1).project(z[i] + h * gv)
    return z


def anchored_objective(pm: AnchoredProblem, x0, W, dynamics="catching_up",
                       rho=None, check_locality=True, return_parts=False):
    """Objective of the anchored problem at ``(x0, W)``."""
    W = np.asarray(W, float).reshape(pm.N, -1)
    z = anchored_states(pm, x0, W, rho, dynamics)
    h = pm.h
    Delta = np.diff(z, axis=0) / h
    G = np.array([pm.dynamics(i * h, z[i], W[i]) for i in range(pm.N)])
    reward = h * float(np.sum(pm.cost.f1_batch(G - Delta)
                              - pm.cost.f2_batch(0.0, W)))
    pen = pm.penalty(z[0], Delta, W)
    if check_locality and pen > pm.eps_bar / 2:
        raise LocalityViolated(pen, pm.eps_bar / 2)
    value = reward - 0.5 * pm.kappa * pen
    if return_parts:
        return value, {"reward": reward, "penalty": pen, "states": z,
                       "kappa_penalty": pm.kappa * pen}
    return value


def anchored_feasibility(pm: AnchoredProblem, z, W, rho=None):
    """Named violations of the discrete constraints."""
    z = np.asarray(z, float)
    W = np.asarray(W, float).reshape(pm.N, -1)
    rho = pm.rho_ref if rho is None else rho
    A = pm.polyhedron.normals
    face = max(0.0, max(float(np.max(A @ z[i] - pm.c_shift[i % pm.N]))
                        for i in range(1, pm.N + 1)))
    return {
        "faces": face,
        "periodic": float(np.linalg.norm(z[-1] - z[0])),
        "zero_mean": float(np.linalg.norm(W.sum(axis=0))),
        "box": float(max(0.0, (np.abs(W) - pm.box).max())),
        "slack_ball": float(max(0.0, np.linalg.norm(rho, axis=1).max() - 1)),
    }


@dataclass
class AnchoredSolution:
    x0: np.ndarray
    controls: np.ndarray
    states: np.ndarray
    rho: np.ndarray
    value: float
    penalty: float
    kappa_penalty: float
    control_error: float
    success: bool
    message: str = ""


def solve_anchored(pm: AnchoredProblem, maxiter=200, start=None):
    """Maximize the anchored problem with the prescribed-reaction dynamics.

    Decision variables are ``z_0..z_{N-1}`` (``z_N = z_0``), the controls
    and the slack directions on intervals with a positive radius.
    """
    N, h = pm.N, pm.h
    n, d = pm.polyhedron.dim, pm.u_avg.shape[1]
    slack_idx = np.flatnonzero(pm.r_bar > 0)
    ns = slack_idx.size
    A, dyn = pm.polyhedron.normals, pm.dynamics

    def unpack(v):
        z = v[:N * n].reshape(N, n)
        W = v[N * n:N * n + N * d].reshape(N, d)
        R = np.zeros((N, n))
        R[slack_idx] = v[N * n + N * d:].reshape(ns, n)
        return z, W, R

    def full_states(z):
        return np.vstack([z, z[:1]])

    def neg_obj(v):
        z, W, R = unpack(v)
        Z = full_states(z)
        Delta = np.diff(Z, axis=0) / h
        G = np.array([dyn(i * h, Z[i], W[i]) for i in range(N)])
        reward = h * float(np.sum(pm.cost.f1_batch(G - Delta)
                                  - pm.cost.f2_batch(0.0, W)))
        return -(reward - 0.5 * pm.kappa * pm.penalty(Z[0], Delta, W))

    def neg_grad(v):
        z, W, R = unpack(v)
        Z = full_states(z)
        Delta = np.diff(Z, axis=0) / h
        gz = np.zeros((N + 1, n))
        gw = np.zeros((N, d))
        gr = np.zeros((N, n))
        k = pm.kappa
        gz[0] += -k * (Z[0] - pm.x_nodes[0])
        dDelta = -k * h * (Delta - pm.xdot_avg)
        gz[1:] += dDelta / h
        gz[:-1] -= dDelta / h
        gw += -k * h * (W - pm.u_avg)
        for i in range(N):
            gw[i] -= h * pm.cost.df2(i * h, W[i])
            # f1 argument equals zeta - R r_bar along feasible points
            eta = pm.cost.f1_subdiff(pm.zeta[i] - R[i] * pm.r_bar[i])[0]
            gr[i] -= h * eta * pm.r_bar[i]
        gz[0] += gz[-1]
        out = np.concatenate([gz[:-1].ravel(), gw.ravel(),
                              gr[slack_idx].ravel()])
        return -out

    def dyn_eq(v):
        z, W, R = unpack(v)
        Z = full_states(z)
        res = np.empty((N, n))
        for i in range(N):
            drift = -pm.zeta[i] + dyn(i * h, Z[i], W[i]) + R[i] * pm.r_bar[i]
            res[i] = Z[i + 1] - Z[i] - h * drift
        return res.ravel()

    def dyn_jac(v):
        z, W, R = unpack(v)
        Z = full_states(z)
        J = np.zeros((N * n, v.size))
        for i in range(N):
            rows = slice(i * n, (i + 1) * n)
            Dx = dyn.dxg(i * h, Z[i], W[i])
            Dw = dyn.dwg(i * h, Z[i], W[i])
            nxt = (i + 1) % N
            J[rows, nxt * n:(nxt + 1) * n] += np.eye(n)
            J[rows, i * n:(i + 1) * n] += -np.eye(n) - h * Dx
            J[rows, N * n + i * d:N * n + (i + 1) * d] = -h * Dw
            pos = np.flatnonzero(slack_idx == i)
            if pos.size:
                c0 = N * n + N * d + pos[0] * n
                J[rows, c0:c0 + n] = -h * pm.r_bar[i] * np.eye(n)
        return J

    def mean_eq(v):
        return unpack(v)[1].sum(axis=0)

    mean_jac = np.zeros((d, N * n + N * d + ns * n))
    for i in range(N):
        mean_jac[:, N * n + i * d:N * n + (i + 1) * d] = np.eye(d)

    face_rows = []
    for i in range(1, N + 1):
        idx = i % N
        for j in range(A.shape[0]):
            face_rows.append((idx, j, pm.c_shift[idx, j]))

    def face_ineq(v):
        z = unpack(v)[0]
        return np.array([c - A[j] @ z[idx] for idx, j, c in face_rows])

    face_jac = np.zeros((len(face_rows), N * n + N * d + ns * n))
    for r, (idx, j, _) in enumerate(face_rows):
        face_jac[r, idx * n:(idx + 1) * n] = -A[j]

    def ball_ineq(v):
        R = unpack(v)[2][slack_idx]
        return 1.0 - np.sum(R * R, axis=1)

    def ball_jac(v):
        R = unpack(v)[2][slack_idx]
        J = np.zeros((ns, v.size))
        for r in range(ns):
            c0 = N * n + N * d + r * n
            J[r, c0:c0 + n] = -2 * R[r]
        return J

    if start is None:
        z0 = pm.x_nodes[:N]
        w0 = pm.u_avg
        r0 = pm.rho_ref[slack_idx]
    else:
        z0, w0, r0 = start
    v0 = np.concatenate([np.ravel(z0), np.ravel(w0), np.ravel(r0)])
    bounds = [(None, None)] * (N * n)
    for i in range(N):
        bounds += [(-b, b) for b in np.broadcast_to(pm.box, (d,))]
    bounds += [(-1, 1)] * (ns * n)
    cons = [{"type": "eq", "fun": dyn_eq, "jac": dyn_jac},
            {"type": "eq", "fun": mean_eq, "jac": lambda v: mean_jac},
            {"type": "ineq", "fun": face_ineq, "jac": lambda v: face_jac}]
    if ns:
        cons.append({"type": "ineq", "fun": ball_ineq, "jac": ball_jac})
    res = minimize(neg_obj, v0, jac=neg_grad, bounds=bounds,
                   constraints=cons, method="SLSQP",
                   options={"maxiter": maxiter, "ftol": 1e-14})
    z, W, R = unpack(res.x)
    Z = full_states(z)
    Delta = np.diff(Z, axis=0) / h
    pen = pm.penalty(Z[0], Delta, W)
    if pen > pm.eps_bar / 2:
        logger.warning("anchored solution violates the locality bound")
    err = control_l2_error(pm, W)
    return AnchoredSolution(Z[0], W, Z, R, -float(res.fun), pen,
                            pm.kappa * pen, err, bool(res.success),
                            str(res.message))


def control_l2_error(pm: AnchoredProblem, W):
    """``||w - ubar||_{L^2(0,T)}`` for grid controls ``W``."""
    h = pm.h
    W = np.asarray(W, float).reshape(pm.N, -1)
    total = 0.0
    for i in range(pm.N):
        for a, b, k in pm.reference.pieces(i * h, (i + 1) * h):
            total += (b - a) * float(np.sum((W[i] - pm.reference.controls[k])
                                            ** 2))
    return float(np.sqrt(total))


def cost_to_json(cost: CostSpec):
    return json.dumps(cost.to_dict())


@dataclass
class GaitProblem:
    """Plain optimization problem: polyhedron, dynamics, cost and control set.

    ``x0`` fixes the initial state; ``None`` means the free periodic mode
    where the initial state tracks the period-map limit.
    """

    polyhedron: Polyhedron
    dynamics: Dynamics
    cost: CostSpec
    box: np.ndarray
    T: float
    m: int
    x0: Optional[np.ndarray] = None
    zero_mean: bool = True
    tv_bound: Optional[float] = None

    def __post_init__(self):
        self.box = np.broadcast_to(np.atleast_1d(np.asarray(self.box, float)),
                                   (self.dynamics.d,)).copy()
        if self.x0 is not None:
            self.x0 = np.atleast_1d(np.asarray(self.x0, float))

    @classmethod
    def from_model(cls, model, cost=None, m=8, x0=None, tv_bound=None):
        if cost is None:
            cost = crawler_cost(model)
        return cls(model.C, model.dynamics, cost, model.box, model.T, m, x0,
                   True, tv_bound)

    @property
    def N(self):
        return 2 ** self.m

    @property
    def h(self):
        return self.T / self.N

    def grid(self, values):
        return ControlGrid(np.asarray(values, float).reshape(self.N, -1),
                           self.T, self.box, self.zero_mean, self.tv_bound)

    def evaluate(self, values, x0):
        return objective(self.polyhedron, self.dynamics, self.cost,
                         self.grid(values), x0)
