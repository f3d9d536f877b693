"""Multistart projected subgradient search with pattern-search polishing."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .exceptions import NotOneLink
from .sweeping import fmt, periodic_start_batch, total_variation
from .transcription import GaitProblem, objective_batch, project_controls

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    starts: int = 16
    seed: int = 0
    max_iters: int = 60
    step0: float = 0.5
    fd_step: float = 1e-6
    tv_bound: Optional[float] = None
    periodic_mode: str = "free"  # or "fixed"
    stall_tol: float = 1e-10
    stall_iters: int = 15
    polish_rounds: int = 40
    polish_candidates: int = 128
    threads: Optional[int] = None

    def __post_init__(self):
        if self.starts < 1 or self.max_iters < 0:
            raise ValueError("starts must be >= 1 and max_iters >= 0")
        if self.step0 <= 0 or self.fd_step <= 0:
            raise ValueError("step sizes must be positive")
        if self.periodic_mode not in ("free", "fixed"):
            raise ValueError("periodic_mode must be 'free' or 'fixed'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in data.items()
                 if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class OptimizeResult:
    grid: object
    x0: np.ndarray
    J: float
    history: list = field(default_factory=list)
    start_values: list = field(default_factory=list)
    stalled: list = field(default_factory=list)

    def history_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iter", "start", "J", "step"])
        for it, start, J, step in self.history:
            writer.writerow([it, start, fmt(J), fmt(step)])
        return buf.getvalue()


def estimate_gradient(objective, point, fd_step=1e-6):
    """Central finite differences, coordinate by coordinate."""
    x = np.asarray(point, float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = fd_step
        gf[k] = (objective((flat + e).reshape(x.shape))
                 - objective((flat - e).reshape(x.shape))) / (2 * fd_step)
    return g


class _Evaluator:
    """Batched objective for one problem with the start state handled."""

    def __init__(self, problem: GaitProblem, config: SolverConfig):
        self.problem = problem
        self.free = problem.x0 is None or config.periodic_mode == "free"
        P = problem.polyhedron
        self.default_x0 = (problem.x0 if problem.x0 is not None
                           else np.array(P.interior_point, float))

    def start_state(self, W):
        if not self.free:
            return self.default_x0
        pb = self.problem
        X0 = periodic_start_batch(pb.polyhedron, pb.dynamics, W[None],
                                  self.default_x0[None], pb.h)
        return X0[0]

    def values(self, Ws, x0):
        pb = self.problem
        Ws = np.asarray(Ws, float)
        X0 = np.broadcast_to(x0, (Ws.shape[0], x0.size))
        J, _ = objective_batch(pb.polyhedron, pb.dynamics, pb.cost, Ws, X0,
                               pb.T)
        return J

    def value(self, W, x0):
        return float(self.values(W[None], x0)[0])

    def gradient(self, W, x0, fd_step):
        N, d = W.shape
        E = np.eye(N * d).reshape(N * d, N, d) * fd_step
        batch = np.concatenate([W[None] + E, W[None] - E])
        vals = self.values(batch, x0)
        return ((vals[:N * d] - vals[N * d:]) / (2 * fd_step)).reshape(N, d)


def _initial_points(problem, config, rng):
    N, d = problem.N, problem.dynamics.d
    box = problem.box
    points = [np.zeros((N, d))]
    t = (np.arange(N) + 0.5) / N
    square = np.where(t < 0.5, 1.0, -1.0)
    sq = np.column_stack([np.roll(square, ell * N // (2 * d)) * box[ell]
                          for ell in range(d)])
    points.append(sq)
    extra = config.starts - len(points)
    if extra > 0:
        sampler = qmc.LatinHypercube(d=N * d, seed=rng)
        S = sampler.random(extra) * 2.0 - 1.0
        for row in S:
            points.append(row.reshape(N, d) * box)
    points = points[:config.starts]
    return [project_controls(p, box, problem.zero_mean,
                             config.tv_bound if config.tv_bound is not None
                             else problem.tv_bound) for p in points]


def _run_start(ev: _Evaluator, W, config, rng, start):
    pb = ev.problem
    tv = config.tv_bound if config.tv_bound is not None else pb.tv_bound

    def proj(V):
        return project_controls(V, pb.box, pb.zero_mean, tv)

    history = []
    x0 = ev.start_state(W)
    J = ev.value(W, x0)
    best = (J, W.copy(), x0.copy())
    history.append((0, start, J, 0.0))
    stall = 0
    stalled = False
    for k in range(1, config.max_iters + 1):
        G = ev.gradient(W, x0, config.fd_step)
        scale = float(np.abs(G).max())
        step = config.step0 / np.sqrt(k)
        if scale <= 1e-14:
            stalled = True
            history.append((k, start, J, 0.0))
            break
        W = proj(W + step * G / scale)
        x0 = ev.start_state(W)
        J = ev.value(W, x0)
        history.append((k, start, J, step))
        if J > best[0] + config.stall_tol:
            best = (J, W.copy(), x0.copy())
            stall = 0
        else:
            stall += 1
            if stall >= config.stall_iters:
                stalled = True
                break
    # pattern search from the best point over zero-sum pair moves
    J, W, x0 = best
    N, d = W.shape
    it = len(history)
    delta = 0.5 * float(pb.box.max())
    rounds = 0
    while delta >= 1.0 / 64 and rounds < config.polish_rounds:
        rounds += 1
        K = config.polish_candidates
        i = rng.integers(0, N, size=K)
        j = rng.integers(0, N, size=K)
        ell = rng.integers(0, d, size=K)
        sgn = rng.choice([-1.0, 1.0], size=K)
        cands = np.repeat(W[None], K, axis=0)
        cands[np.arange(K), i, ell] += sgn * delta
        cands[np.arange(K), j, ell] -= sgn * delta
        cands = np.stack([proj(c) for c in cands] + _structured_moves(W, pb,
                                                                     proj))
        vals = ev.values(cands, x0)
        b = int(np.argmax(vals))
        if vals[b] > J + config.stall_tol:
            W = cands[b]
            x0 = ev.start_state(W)
            J = ev.value(W, x0)
        else:
            delta *= 0.5
        history.append((it, start, J, delta))
        it += 1
    return J, W, x0, history, stalled


def _structured_moves(W, problem, proj):
    """Amplified and bang-bang variants; they leave flat plateaus where
    the finite-difference gradient vanishes."""
    N = W.shape[0]
    moves = [proj(c * W) for c in (1.5, 3.0)]
    for width in (max(N // 16, 1), max(N // 4, 1)):
        kernel = np.ones(width) / width
        smooth = np.column_stack([
            np.convolve(np.concatenate([W[-width:, ell], W[:, ell]]),
                        kernel, mode="valid")[1:N + 1]
            for ell in range(W.shape[1])])
        moves.append(proj(np.sign(smooth) * problem.box))
    return moves


def _thread_count(config):
    if config.threads is not None:
        return max(1, int(config.threads))
    env = os.environ.get("CRAWLOPT_THREADS")
    return max(1, int(env)) if env else 1


def optimize(problem: GaitProblem, config: SolverConfig = None):
    """Maximize ``J`` over feasible control grids; deterministic in the seed."""
    config = config or SolverConfig()
    ss = np.random.SeedSequence(config.seed)
    init_rng, *child = [np.random.default_rng(s)
                        for s in ss.spawn(config.starts + 1)]
    ev = _Evaluator(problem, config)
    points = _initial_points(problem, config, init_rng)

    def job(k):
        return _run_start(ev, points[k], config, child[k], k)

    threads = _thread_count(config)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(len(points))))
    else:
        results = [job(k) for k in range(len(points))]
    history, values, stalled = [], [], []
    best_k = 0
    for k, (J, W, x0, hist, st) in enumerate(results):
        history.extend(hist)
        values.append(J)
        stalled.append(st)
        # strict comparison keeps the lowest start index on ties
        if J > results[best_k][0]:
            best_k = k
    J, W, x0, _, _ = results[best_k]
    grid = problem.grid(W)
    logger.info("best J %.6g from start %d", J, best_k)
    return OptimizeResult(grid, x0, J, history, values, stalled)


# ---------------------------------------------------------------------------
# bounded-variation regularization
# ---------------------------------------------------------------------------
def _face_labels(problem, states, tol=1e-9):
    P = problem.polyhedron
    a = P.normals[:, 0]
    hi = float(np.min(P.offsets[a > 0] / a[a > 0]))
    lo = float(np.max(P.offsets[a < 0] / a[a < 0]))
    labels = np.full(len(states), "", dtype=object)
    labels[states[:, 0] >= hi - tol] = "b"
    labels[states[:, 0] <= lo + tol] = "a"
    return labels


def bv_regularize(problem: GaitProblem, grid, traj, tol=1e-9):
    """Average the control over transit runs and boundary-hold clusters.

    Transit runs are the index ranges between consecutive contacts;
    clusters span the first to last node sitting on the same face. The
    reaction mass on each face is kept, so ``J`` is unchanged when
    ``f2 = 0`` and does not decrease for a convex ``f2``.
    """
    if problem.polyhedron.dim != 1 or problem.dynamics.d != 1:
        raise NotOneLink("regularization is defined for the one-link model")
    W = np.asarray(grid.values, float).reshape(-1)
    N = W.size
    labels = _face_labels(problem, traj.states[:N], tol)
    cuts = [0]
    i = 0
    while i < N:
        if not labels[i]:
            i += 1
            continue
        # a hold cluster runs to the last node on this face before the
        # opposite face is reached
        j = k = i
        while k < N and labels[k] != _other(labels[i]):
            if labels[k] == labels[i]:
                j = k
            k += 1
        cuts += [i, j]
        i = j + 1
    cuts.append(N)
    out = W.copy()
    for s, e in zip(cuts[:-1], cuts[1:]):
        if e > s:
            out[s:e] = W[s:e].mean()
    return grid.with_values(out[:, None])


def _other(label):
    return "a" if label == "b" else "b"
