"""Multiplier extraction and checks of the first-order conditions.

Sign convention used throughout (grid version, ``N`` intervals):

    p^{i+1} - p^i = -h Dxg_i^T p^i + sum_{j in I(x^i)} xi^{ij} x*^j
    p^N = p^0
    psi^i = -Dwg_i^T p^i - omega - lambda Df2(w^i)   in  N_U(w^i)
    lambda >= 0,  lambda + max_i |p^i| = 1

``xi^{ij}`` are masses; certificates store densities ``xi^{ij} / h``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .exceptions import Infeasible, PeriodTooShort
from .polytope import DEFAULT_TOL, Polyhedron, box_normal_cone_contains
from .sweeping import ControlGrid, DiscreteTrajectory
from .transcription import GaitProblem, AnchoredProblem, ReferenceProcess

FEAS_TOL = 1e-7
RESIDUAL_NAMES = ("adjoint", "transversality", "maximality", "support",
                  "nontriviality")


@dataclass
class StationarityCertificate:
    lam: float
    p: np.ndarray       # (N+1, n), p[N] == p[0]
    xi: np.ndarray      # (N, sigma) densities
    omega: np.ndarray   # (d,)
    psi: np.ndarray     # (N, d)
    eta: np.ndarray     # (N, n)
    beta: np.ndarray    # (N, n)
    h: float
    residuals: dict = field(default_factory=dict)
    label: str = ""

    @property
    def N(self):
        return self.xi.shape[0]

    def scaled(self, c):
        return StationarityCertificate(
            c * self.lam, c * self.p, c * self.xi, c * self.omega,
            c * self.psi, self.eta.copy(), c * self.beta, self.h)

    def normalized(self):
        s = self.lam + float(np.abs(self.p).max())
        if s <= 0:
            raise ValueError("cannot normalize the zero certificate")
        return self.scaled(1.0 / s)

    def to_dict(self):
        return {"lambda": self.lam, "p": self.p.tolist(),
                "xi": self.xi.tolist(), "omega": self.omega.tolist(),
                "psi": self.psi.tolist(), "eta": self.eta.tolist(),
                "beta": self.beta.tolist(), "h": self.h,
                "residuals": dict(self.residuals), "label": self.label}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["lambda"]), np.asarray(data["p"], float),
                   np.asarray(data["xi"], float),
                   np.asarray(data["omega"], float),
                   np.asarray(data["psi"], float),
                   np.asarray(data["eta"], float),
                   np.asarray(data["beta"], float), float(data["h"]),
                   dict(data.get("residuals", {})), data.get("label", ""))

    def report(self, threshold=FEAS_TOL):
        """Plain-text residual table."""
        rows = [f"{'condition':<16}{'residual':>14}  status"]
        for name in RESIDUAL_NAMES:
            if name in self.residuals:
                r = self.residuals[name]
                rows.append(f"{name:<16}{r:>14.6e}  "
                            f"{'ok' if r <= threshold else 'FAIL'}")
        rows.append(f"{'lambda':<16}{self.lam:>14.6e}")
        if self.label:
            rows.append(f"{'class':<16}{self.label:>14}")
        return "\n".join(rows)


def _process_arrays(process):
    if isinstance(process, DiscreteTrajectory):
        return process.states, process.controls, process.h, process.times
    raise TypeError("process must be a DiscreteTrajectory")


def _bound_pattern(W, box, tol=1e-9):
    """+1 at the upper bound, -1 at the lower bound, 0 inside."""
    box = np.broadcast_to(box, W.shape[1:])
    pat = np.zeros(W.shape, dtype=int)
    pat[W >= box - tol] = 1
    pat[W <= -box + tol] = -1
    return pat


def active_faces(P: Polyhedron, states, tol=DEFAULT_TOL, offsets=None):
    """Boolean ``(N, sigma)`` mask of faces active at ``x^i``."""
    c = P.offsets if offsets is None else offsets
    return (P.normals @ states.T).T >= c - tol


def degenerate_certificate(problem: GaitProblem, process):
    """``lambda = 0``, constant ``p``, ``omega = -Dwg^T p``, ``xi = 0``."""
    X, W, h, times = _process_arrays(process)
    N, n = W.shape[0], X.shape[1]
    d = W.shape[1]
    dyn = problem.dynamics
    c = np.zeros(n)
    c[0] = 1.0
    omega = -dyn.dwg(times[0], X[0], W[0]).T @ c
    p = np.tile(c, (N + 1, 1))
    cert = StationarityCertificate(0.0, p, np.zeros((N, problem.polyhedron
                                                      .n_faces)),
                                   omega, np.zeros((N, d)), np.zeros((N, n)),
                                   np.zeros((N, n)), h)
    return cert


class _LPBuilder:
    """Tiny helper collecting sparse rows for ``linprog``."""

    def __init__(self):
        self.n = 0
        self.names = {}
        self.eq_rows, self.eq_rhs = [], []
        self.ub_rows, self.ub_rhs = [], []
        self.bounds = []

    def add(self, name, size, lo=None, hi=None):
        idx = np.arange(self.n, self.n + size)
        self.names[name] = idx
        self.n += size
        self.bounds += [(lo, hi)] * size
        return idx

    def eq(self, coeffs, rhs=0.0):
        self.eq_rows.append(coeffs)
        self.eq_rhs.append(rhs)

    def ub(self, coeffs, rhs=0.0):
        self.ub_rows.append(coeffs)
        self.ub_rhs.append(rhs)

    @staticmethod
    def _matrix(rows, n):
        data, ri, ci = [], [], []
        for r, row in enumerate(rows):
            for j, v in row.items():
                if v != 0.0:
                    ri.append(r)
                    ci.append(j)
                    data.append(v)
        return sparse.csr_matrix((data, (ri, ci)), shape=(len(rows), n))

    def solve(self, c):
        A_eq = self._matrix(self.eq_rows, self.n) if self.eq_rows else None
        A_ub = self._matrix(self.ub_rows, self.n) if self.ub_rows else None
        return linprog(c, A_ub=A_ub, b_ub=self.ub_rhs or None, A_eq=A_eq,
                       b_eq=self.eq_rhs or None, bounds=self.bounds,
                       method="highs")

    def min_violation(self):
        """L1-minimal violation of the equality rows (infeasibility size)."""
        m = len(self.eq_rows)
        rows = []
        for r, row in enumerate(self.eq_rows):
            row = dict(row)
            row[self.n + r] = 1.0
            row[self.n + m + r] = -1.0
            rows.append(row)
        n_tot = self.n + 2 * m
        A_eq = self._matrix(rows, n_tot)
        A_ub = None
        if self.ub_rows:
            A_ub = self._matrix(self.ub_rows, n_tot)
        c = np.concatenate([np.zeros(self.n), np.ones(2 * m)])
        res = linprog(c, A_ub=A_ub, b_ub=self.ub_rhs or None, A_eq=A_eq,
                      b_eq=self.eq_rhs, method="highs",
                      bounds=self.bounds + [(0, None)] * (2 * m))
        return float(res.fun) if res.status == 0 else float("inf")


def _build_system(problem, process, pm=None, min_lambda=0.0,
                  margin=False, tol=DEFAULT_TOL):
    X, W, h, times = _process_arrays(process)
    N, n, d = W.shape[0], X.shape[1], W.shape[1]
    P, dyn, cost = problem.polyhedron, problem.dynamics, problem.cost
    A = P.normals
    offsets = None
    if pm is not None:
        act = np.array([A @ X[i] >= pm.c_shift[i] - tol for i in range(N)])
    else:
        act = active_faces(P, X[:N], tol)
    pattern = _bound_pattern(W, problem.box)

    lp = _LPBuilder()
    lam = lp.add("lam", 1, min_lambda, None)[0]
    t = lp.add("t", 1, 0.0, None)[0]
    pv = lp.add("p", N * n).reshape(N, n)
    xi_idx = {}
    for i in range(N):
        for j in np.flatnonzero(act[i]):
            xi_idx[(i, j)] = lp.add(f"xi{i}_{j}", 1, 0.0, None)[0]
    om = lp.add("omega", d)
    delta = lp.add("delta", 1, 0.0, 1.0)[0] if margin else None

    theta_x = np.zeros((N, n))
    kappa = 0.0
    if pm is not None:
        theta_x = pm.xdot_avg - np.diff(X, axis=0) / h
        kappa = pm.kappa

    # adjoint recursion with p^N = p^0
    for i in range(N):
        Dx = dyn.dxg(times[i], X[i], W[i])
        nxt = (i + 1) % N
        for k in range(n):
            row = {}
            row[pv[nxt, k]] = row.get(pv[nxt, k], 0.0) + 1.0
            row[pv[i, k]] = row.get(pv[i, k], 0.0) - 1.0
            for l in range(n):
                row[pv[i, l]] = row.get(pv[i, l], 0.0) + h * Dx[l, k]
            for j in np.flatnonzero(act[i]):
                row[xi_idx[(i, j)]] = -A[j, k]
            lam_coef = h * float(Dx[:, k] @ theta_x[i])
            if pm is not None and i == 0:
                lam_coef += h * kappa * (X[0, k] - pm.x_nodes[0, k])
            if lam_coef:
                row[lam] = row.get(lam, 0.0) - lam_coef
            lp.eq(row)

    # weak maximality: expression e = psi in N_U(w)
    for i in range(N):
        Dw = dyn.dwg(times[i], X[i], W[i])
        df2 = cost.df2(times[i], W[i])
        lam_vec = -df2
        if pm is not None:
            lam_vec = lam_vec + kappa * (pm.u_avg[i] - W[i]) \
                - Dw.T @ theta_x[i]
        for ell in range(d):
            row = {om[ell]: -1.0}
            for k in range(n):
                row[pv[i, k]] = row.get(pv[i, k], 0.0) - Dw[k, ell]
            if lam_vec[ell]:
                row[lam] = row.get(lam, 0.0) + lam_vec[ell]
            s = pattern[i, ell]
            if s == 0:
                lp.eq(row)
            else:
                # s * e >= delta  <=>  -s * e + delta <= 0
                neg = {j: -s * v for j, v in row.items()}
                if margin:
                    neg[delta] = 1.0
                lp.ub(neg)

    # slack condition where the perturbation radius is positive
    eta_theta = {}
    if pm is not None:
        for i in np.flatnonzero(pm.r_bar > 0):
            gens = cost.f1_subdiff(process.reactions[i])
            th = lp.add(f"eta{i}", len(gens), 0.0, None)
            eta_theta[i] = (th, gens)
            lp.eq({**{j: 1.0 for j in th}, lam: -1.0})
            rho = pm.rho_ref[i]
            on_sphere = np.linalg.norm(rho) >= 1 - 1e-12
            c_var = lp.add(f"beta{i}", 1, 0.0, None)[0] if on_sphere else None
            for k in range(n):
                row = {pv[i, k]: 1.0, lam: -theta_x[i, k]}
                for j, g in zip(th, gens):
                    row[j] = g[k]
                if on_sphere:
                    row[c_var] = -rho[k]
                lp.eq(row)

    # normalization
    for i in range(N):
        for k in range(n):
            lp.ub({pv[i, k]: 1.0, t: -1.0})
            lp.ub({pv[i, k]: -1.0, t: -1.0})
    lp.eq({lam: 1.0, t: 1.0}, 1.0)
    ctx = {"X": X, "W": W, "h": h, "times": times, "act": act,
           "xi_idx": xi_idx, "pv": pv, "lam": lam, "t": t, "om": om,
           "delta": delta, "eta": eta_theta, "theta_x": theta_x,
           "N": N, "n": n, "d": d, "kappa": kappa}
    return lp, ctx


def _certificate_from(x, problem, process, ctx, pm=None):
    N, n, d, h = ctx["N"], ctx["n"], ctx["d"], ctx["h"]
    X, W, times = ctx["X"], ctx["W"], ctx["times"]
    sigma = problem.polyhedron.n_faces
    lam = max(float(x[ctx["lam"]]), 0.0)
    p = np.vstack([x[ctx["pv"]], x[ctx["pv"][:1]]])
    xi = np.zeros((N, sigma))
    for (i, j), idx in ctx["xi_idx"].items():
        xi[i, j] = max(float(x[idx]), 0.0) / h
    omega = np.asarray(x[ctx["om"]], float)
    psi = np.zeros((N, d))
    eta = np.zeros((N, n))
    beta = np.zeros((N, n))
    for i in range(N):
        Dw = problem.dynamics.dwg(times[i], X[i], W[i])
        psi[i] = -Dw.T @ p[i] - omega - lam * problem.cost.df2(times[i], W[i])
        if pm is not None:
            psi[i] += lam * (ctx["kappa"] * (pm.u_avg[i] - W[i])
                             - Dw.T @ ctx["theta_x"][i])
        gens = problem.cost.f1_subdiff(process.reactions[i])
        if i in ctx["eta"] and lam > 0:
            th, gens = ctx["eta"][i]
            eta[i] = np.asarray(x[th]) @ gens / lam
        else:
            eta[i] = gens[0]
        if pm is not None and pm.r_bar[i] > 0:
            beta[i] = h * pm.r_bar[i] * (p[i] + lam * (eta[i]
                                                       - ctx["theta_x"][i]))
    cert = StationarityCertificate(lam, p, xi, omega, psi, eta, beta, h)
    s = lam + float(np.abs(p).max())
    if s <= 0:
        return None
    return cert.scaled(1.0 / s)


def extract_multipliers(process, problem: GaitProblem, mode="plain",
                        request="any", min_lambda=0.0):
    """Find multipliers for ``process`` by linear programming.

    ``mode`` is ``'plain'`` or a :class:`AnchoredProblem`. ``request='any'``
    returns the degenerate certificate when it is valid;
    ``'nondegenerate'`` maximizes the strict-complementarity margin on
    control components at a bound, then ``lambda``.
    """
    pm = mode if isinstance(mode, AnchoredProblem) else None
    if pm is None and mode != "plain":
        raise ValueError(f"unknown mode {mode!r}")
    if request == "any" and pm is None and min_lambda <= 0:
        cert = degenerate_certificate(problem, process)
        cert.residuals = check_continuous_conditions(process, cert, problem)
        if max(cert.residuals.values()) <= FEAS_TOL:
            cert.label = classify_degenerate(cert)
            return cert

    attempts = []
    if request == "nondegenerate":
        lp, ctx = _build_system(problem, process, pm, min_lambda, margin=True)
        c = np.zeros(lp.n)
        c[ctx["delta"]] = -1.0
        attempts.append((lp, ctx, c))
    lp, ctx = _build_system(problem, process, pm, min_lambda)
    c = np.zeros(lp.n)
    c[ctx["lam"]] = -1.0
    attempts.append((lp, ctx, c))

    for lp_k, ctx_k, c_k in attempts:
        res = lp_k.solve(c_k)
        if res.status != 0:
            continue
        if ctx_k["delta"] is not None and res.x[ctx_k["delta"]] <= 1e-9:
            continue
        cert = _certificate_from(res.x, problem, process, ctx_k, pm)
        if cert is None:
            continue
        cert.residuals = check_continuous_conditions(process, cert, problem)
        cert.label = classify_degenerate(cert)
        return cert

    # lambda came out zero with p = 0: anchor p^0 to force nontriviality
    for k in range(ctx["n"]):
        for sign in (1.0, -1.0):
            lp_a, ctx_a = _build_system(problem, process, pm, min_lambda)
            lp_a.eq({ctx_a["pv"][0, k]: 1.0, ctx_a["t"]: -sign}, 0.0)
            res = lp_a.solve(np.zeros(lp_a.n))
            if res.status == 0:
                cert = _certificate_from(res.x, problem, process, ctx_a, pm)
                if cert is not None:
                    cert.residuals = check_continuous_conditions(
                        process, cert, problem)
                    cert.label = classify_degenerate(cert)
                    return cert
    raise Infeasible(lp.min_violation())


def check_continuous_conditions(process, cert: StationarityCertificate,
                                problem: GaitProblem, tol=DEFAULT_TOL):
    """Five named residuals of the grid conditions."""
    X, W, h, times = _process_arrays(process)
    N = W.shape[0]
    if cert.N != N or cert.p.shape[0] != N + 1:
        raise ValueError("certificate does not match the process mesh")
    P, dyn, cost = problem.polyhedron, problem.dynamics, problem.cost
    A = P.normals
    act = active_faces(P, X[:N], tol)
    adj = 0.0
    maxim = 0.0
    for i in range(N):
        Dx = dyn.dxg(times[i], X[i], W[i])
        Dw = dyn.dwg(times[i], X[i], W[i])
        pred = -h * Dx.T @ cert.p[i] + h * (cert.xi[i] @ A)
        adj = max(adj, float(np.abs(cert.p[i + 1] - cert.p[i] - pred).max()))
        e = -Dw.T @ cert.p[i] - cert.omega \
            - cert.lam * cost.df2(times[i], W[i])
        box = problem.box
        maxim = max(maxim, box_normal_cone_contains(W[i], -box, box, e))
    inactive = h * float(cert.xi[~act].sum())
    negative = h * float(-cert.xi[cert.xi < 0].sum())
    return {
        "adjoint": adj,
        "transversality": float(np.abs(cert.p[-1] - cert.p[0]).max()),
        "maximality": maxim,
        "support": inactive + negative,
        "nontriviality": abs(cert.lam + float(np.abs(cert.p).max()) - 1.0)
        + max(0.0, -cert.lam),
    }


def classify_degenerate(cert: StationarityCertificate, tol=1e-9):
    """'degenerate', 'strongly_nondegenerate' or 'nondegenerate'."""
    p = cert.p[:-1]
    shifted = p + cert.omega[: p.shape[1]] if p.shape[1] == cert.omega.size \
        else p
    const = float(np.abs(p - p[0]).max()) <= tol
    if cert.lam <= tol and const and float(np.abs(shifted).max()) <= tol \
            and float(np.abs(cert.xi).max(initial=0.0)) <= tol:
        return "degenerate"
    if float(np.linalg.norm(shifted, axis=1).min()) > tol:
        return "strongly_nondegenerate"
    return "nondegenerate"


# ---------------------------------------------------------------------------
# analytic one-link reference
# ---------------------------------------------------------------------------
def one_link_process(a, b, T):
    """Four-phase gait from ``x = b`` as an exact piecewise process."""
    L = b - a
    if not T > 2 * L:
        raise PeriodTooShort(f"period {T} must exceed 2(b-a) = {2 * L}")
    H = (T - 2 * L) / 2
    breaks = np.array([0.0, H, H + L, 2 * H + L, T])
    controls = np.array([[1.0], [-1.0], [-1.0], [1.0]])
    states = np.array([b, b, a, a, b], float)
    return ReferenceProcess(breaks, controls, states)


def averaged_controls(ref: ReferenceProcess, m):
    N = 2 ** m
    h = ref.T / N
    W = np.zeros((N, ref.controls.shape[1]))
    for i in range(N):
        for s0, s1, k in ref.pieces(i * h, (i + 1) * h):
            W[i] += (s1 - s0) / h * ref.controls[k]
    return W


def one_link_reference(a, b, T, f2_kind="zero", m=8, lam=0.5):
    """Return ``(grid, x0, J_star, certificate)`` for the one-link problem.

    For ``f2_kind='zero'`` the gait is the four-phase bang-bang cycle with
    ``J* = (T - 2(b - a)) / 2``; the certificate has piecewise-constant
    ``p = -/+ s`` (``s = 1 - lam``) switching at the last hold nodes.
    For ``'quadratic'`` the reference is ``u = 0`` at the midpoint with
    ``lambda = 1``, ``p = 0``.
    """
    from .crawler import CrawlerModel
    from .sweeping import simulate
    model = CrawlerModel.one_link(a, b, T)
    N = 2 ** m
    h = T / N
    if f2_kind == "quadratic":
        grid = ControlGrid(np.zeros((N, 1)), T, [1.0])
        x0 = np.array([(a + b) / 2])
        cert = StationarityCertificate(
            1.0, np.zeros((N + 1, 1)), np.zeros((N, 2)), np.zeros(1),
            np.zeros((N, 1)), np.zeros((N, 1)), np.zeros((N, 1)), h)
        cert.label = classify_degenerate(cert)
        return grid, x0, 0.0, cert
    if f2_kind != "zero":
        raise ValueError(f"unknown f2 kind {f2_kind!r}")
    ref = one_link_process(a, b, T)
    grid = ControlGrid(averaged_controls(ref, m), T, [1.0])
    x0 = np.array([float(b)])
    J_star = (T - 2 * (b - a)) / 2
    traj = simulate(model.C, model.dynamics, grid, x0)
    s = 1.0 - lam
    t = np.arange(N) * h
    H = ref.breaks[1]
    # p = +s on the transit b -> a and the hold at a, -s elsewhere
    plus = (t >= H) & (t < 2 * H + (b - a))
    p = np.where(plus, s, -s)[:, None]
    p = np.vstack([p, p[:1]])
    xi = np.zeros((N, 2))
    A = model.C.normals[:, 0]
    face_b, face_a = int(np.argmax(A)), int(np.argmin(A))
    for i in range(N):
        jump = p[i + 1, 0] - p[i, 0]
        if jump > 0:
            xi[i, face_b] = jump / (A[face_b] * h)
        elif jump < 0:
            xi[i, face_a] = jump / (A[face_a] * h)
    cert = StationarityCertificate(lam, p, xi, np.zeros(1),
                                   -(p[:-1] + 0.0), np.zeros((N, 1)),
                                   np.zeros((N, 1)), h)
    gens = [model.f1_subdifferential(r)[0] for r in traj.reactions]
    cert.eta = np.array(gens)
    problem = GaitProblem(model.C, model.dynamics,
                          _half_abs(), model.box, T, m, x0)
    cert.residuals = check_continuous_conditions(traj, cert, problem)
    cert.label = classify_degenerate(cert)
    return grid, x0, J_star, cert


def _half_abs():
    from .transcription import half_abs_cost
    return half_abs_cost()


def sign_agreement(cert: StationarityCertificate, controls, tol=1e-9):
    """Fraction of intervals with ``w = -sign(p + omega)``."""
    W = np.asarray(controls, float).reshape(cert.N, -1)
    z = cert.p[:-1] + cert.omega
    ok = (np.abs(z) > tol) & (np.abs(W + np.sign(z)) <= 1e-9)
    return float(np.mean(np.all(ok, axis=1)))
