"""Polyhedra in H-representation.

A polyhedron is stored as ``{x : A x <= c}`` with unit-length rows of ``A``.
Projection uses a primal active-set method started from the interior point
found at construction; batched projection for low dimension enumerates face
subsets in a vectorized way.
"""
from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from .exceptions import InfeasiblePolyhedron, PointOutside

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class ActiveSet:
    indices: tuple
    tolerance: float

    def __contains__(self, j):
        return j in self.indices

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


@dataclass
class ConeDecomposition:
    """Nonnegative coefficients of a vector over active face normals."""

    coefficients: dict = field(default_factory=dict)
    residual: float = 0.0
    tolerance: float = DEFAULT_TOL

    @property
    def feasible(self):
        return self.residual <= self.tolerance and all(
            v >= 0 for v in self.coefficients.values()
        )

    def as_array(self, n_faces):
        out = np.zeros(n_faces)
        for j, v in self.coefficients.items():
            out[j] = v
        return out


class Polyhedron:
    """Convex polyhedron ``{x : <normals[j], x> <= offsets[j]}``.

    Normals are normalized to unit length on construction (offsets are
    rescaled by the same factor). Construction fails with
    :class:`InfeasiblePolyhedron` when the set is empty or has empty
    interior.
    """

    def __init__(self, normals, offsets, *, normalize=True):
        A = np.atleast_2d(np.asarray(normals, dtype=float))
        c = np.asarray(offsets, dtype=float).ravel()
        if A.shape[0] != c.shape[0]:
            raise ValueError(
                f"{A.shape[0]} normals but {c.shape[0]} offsets"
            )
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero normal vector")
        if normalize:
            A = A / norms[:, None]
            c = c / norms
        elif np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("normals must have unit length")
        self.normals = A
        self.offsets = c
        self.normals.setflags(write=False)
        self.offsets.setflags(write=False)
        self.interior_point, self.inradius = self._chebyshev_center()
        if self.inradius <= 1e-12:
            raise InfeasiblePolyhedron(
                "polyhedron is empty or has empty interior"
            )
        self._subsets = None

    # -- construction helpers -------------------------------------------
    @classmethod
    def box(cls, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @classmethod
    def interval(cls, a, b):
        return cls.box([a], [b])

    def _chebyshev_center(self):
        n = self.dim
        # maximize r s.t. A x + r <= c, 0 <= r <= 1
        cost = np.zeros(n + 1)
        cost[-1] = -1.0
        A_ub = np.hstack([self.normals, np.ones((self.n_faces, 1))])
        bounds = [(None, None)] * n + [(0.0, 1.0)]
        res = linprog(cost, A_ub=A_ub, b_ub=self.offsets, bounds=bounds,
                      method="highs")
        if res.status != 0:
            raise InfeasiblePolyhedron(f"interior LP failed: {res.message}")
        return res.x[:n], float(res.x[-1])

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def n_faces(self):
        return self.normals.shape[0]

    def slack(self, x):
        return self.offsets - self.normals @ np.asarray(x, dtype=float)

    def contains(self, x, tol=DEFAULT_TOL):
        return bool(np.all(self.slack(x) >= -tol))

    def _check_inside(self, x, tol):
        x = np.asarray(x, dtype=float)
        if np.all(self.slack(x) >= -tol):
            return x
        p, _ = self.project(x)
        dist = float(np.linalg.norm(x - p))
        if dist > tol:
            raise PointOutside(dist)
        return x

    # -- queries ---------------------------------------------------------
    def active_set(self, x, tol=DEFAULT_TOL):
        """Indices ``j`` with ``c_j - <a_j, x> <= tol``."""
        x = self._check_inside(x, tol)
        idx = np.flatnonzero(self.slack(x) <= tol)
        return ActiveSet(tuple(int(j) for j in idx), tol)

    def decompose(self, v, faces, tol=DEFAULT_TOL):
        """Minimum-norm nonnegative coefficients of ``v`` over ``faces``."""
        v = np.asarray(v, dtype=float)
        faces = list(faces)
        if not faces:
            return ConeDecomposition({}, float(np.linalg.norm(v)), tol)
        M = self.normals[faces].T
        if np.linalg.matrix_rank(M) == len(faces):
            lam, _ = nnls(M, v)
        else:
            # ridge-augmented NNLS selects (approximately) the min-norm
            # solution among nonnegative representations
            eps = 1e-7
            M_aug = np.vstack([M, eps * np.eye(len(faces))])
            v_aug = np.concatenate([v, np.zeros(len(faces))])
            lam, _ = nnls(M_aug, v_aug)
            lam = self._polish_degenerate(M, v, lam)
        resid = float(np.linalg.norm(v - M @ lam))
        return ConeDecomposition(
            {int(j): float(l) for j, l in zip(faces, lam)}, resid, tol
        )

    @staticmethod
    def _polish_degenerate(M, v, lam):
        support = lam > 1e-12
        if not support.any():
            return lam
        sub = M[:, support]
        sol, *_ = np.linalg.lstsq(sub, v, rcond=None)
        if np.all(sol >= 0):
            out = np.zeros_like(lam)
            out[support] = sol
            return out
        return lam

    def normal_cone_coeffs(self, x, v, tol=DEFAULT_TOL):
        """Decompose ``v`` in the normal cone at ``x``.

        Returns a :class:`ConeDecomposition`; check ``.feasible`` to see
        whether ``v`` actually lies in the cone.
        """
        active = self.active_set(x, tol)
        return self.decompose(v, active.indices, tol)

    def check_plicq(self, x, tol=DEFAULT_TOL):
        """True iff the active normals at ``x`` are positively independent."""
        active = list(self.active_set(x, tol).indices)
        if not active:
            return True
        M = self.normals[active].T
        k = len(active)
        res = linprog(-np.ones(k), A_eq=M, b_eq=np.zeros(self.dim),
                      A_ub=np.ones((1, k)), b_ub=[1.0],
                      bounds=[(0, None)] * k, method="highs")
        return bool(res.status == 0 and -res.fun <= 1e-10)

    # -- projection ------------------------------------------------------
    def project(self, y, tol=DEFAULT_TOL, max_iter=None):
        """Euclidean projection of ``y``.

        Returns ``(p, dec)`` where ``dec`` decomposes ``y - p`` over the
        faces active at ``p``.
        """
        y = np.asarray(y, dtype=float)
        if np.all(self.slack(y) >= 0):
            return y.copy(), ConeDecomposition({}, 0.0, tol)
        p = self._active_set_qp(y, max_iter or 50 * (self.n_faces + 1))
        faces = np.flatnonzero(self.slack(p) <= tol)
        return p, self.decompose(y - p, faces, max(tol, 1e-10))

    def _active_set_qp(self, y, max_iter):
        A, c = self.normals, self.offsets
        x = self.interior_point.copy()
        work = []
        for _ in range(max_iter):
            if work:
                Aw = A[work]
                G = Aw @ Aw.T
                lam = np.linalg.lstsq(G, Aw @ (y - x), rcond=None)[0]
                d = y - x - Aw.T @ lam
            else:
                lam = np.zeros(0)
                d = y - x
            if np.linalg.norm(d) <= 1e-13 * (1 + np.linalg.norm(x)):
                if lam.size == 0 or lam.min() >= -1e-13:
                    break
                work.pop(int(np.argmin(lam)))
                continue
            Ad = A @ d
            slack = c - A @ x
            step, block = 1.0, None
            for j in np.flatnonzero(Ad > 1e-15):
                if j in work:
                    continue
                s = max(slack[j], 0.0) / Ad[j]
                if s < step:
                    step, block = s, int(j)
            x = x + step * d
            if block is not None:
                work.append(block)
        else:
            logger.debug("active-set iteration cap reached; polishing")
        return self._polish_projection(y, x)

    def _polish_projection(self, y, x):
        # re-solve the equality-constrained problem on the detected face set
        faces = np.flatnonzero(self.slack(x) <= 1e-10)
        if faces.size == 0:
            return x
        Aw = self.normals[faces]
        lam = np.linalg.lstsq(Aw @ Aw.T, Aw @ y - self.offsets[faces],
                              rcond=None)[0]
        p = y - Aw.T @ lam
        if np.all(self.slack(p) >= -1e-12) and (
            np.linalg.norm(p - y) <= np.linalg.norm(x - y) + 1e-12
        ):
            return p
        return x

    def project_batch(self, Y):
        """Project each row of ``Y``; vectorized for small dimension."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        out = Y.copy()
        bad = np.flatnonzero(np.any(Y @ self.normals.T > self.offsets, axis=1))
        if bad.size == 0:
            return out
        if self.dim == 1:
            lo, hi = self._interval_bounds()
            out[bad, 0] = np.clip(Y[bad, 0], lo, hi)
            return out
        if self._use_enumeration():
            out[bad] = self._project_enumerated(Y[bad])
            return out
        for i in bad:
            out[i] = self.project(Y[i])[0]
        return out

    def _interval_bounds(self):
        a = self.normals[:, 0]
        up = self.offsets[a > 0] / a[a > 0]
        lo = self.offsets[a < 0] / a[a < 0]
        return (lo.max() if lo.size else -np.inf,
                up.min() if up.size else np.inf)

    def _use_enumeration(self):
        if self._subsets is None:
            n, s = self.dim, self.n_faces
            count = sum(_comb(s, k) for k in range(1, n + 1))
            if n > 3 or count > 256:
                self._subsets = []
            else:
                subsets = []
                for k in range(1, n + 1):
                    for S in itertools.combinations(range(s), k):
                        Aw = self.normals[list(S)]
                        G = Aw @ Aw.T
                        if np.linalg.matrix_rank(G) < k:
                            continue
                        subsets.append((list(S), np.linalg.inv(G)))
                self._subsets = subsets
        return bool(self._subsets)

    def _project_enumerated(self, Y):
        best = np.full(Y.shape[0], np.inf)
        out = np.empty_like(Y)
        A, c = self.normals, self.offsets
        for S, Ginv in self._subsets:
            Aw = A[S]
            lam = (Y @ Aw.T - c[S]) @ Ginv.T
            P = Y - lam @ Aw
            ok = np.all(lam >= -1e-12, axis=1) & np.all(
                P @ A.T <= c + 1e-11, axis=1)
            dist = np.where(ok, np.sum((P - Y) ** 2, axis=1), np.inf)
            better = dist < best
            best[better] = dist[better]
            out[better] = P[better]
        miss = ~np.isfinite(best)
        for i in np.flatnonzero(miss):
            out[i] = self.project(Y[i])[0]
        return out

    # -- serialization ---------------------------------------------------
    def to_dict(self):
        return {"normals": self.normals.tolist(),
                "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, data):
        A = np.atleast_2d(np.asarray(data["normals"], dtype=float))
        norms = np.linalg.norm(A, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            warnings.warn("polyhedron normals re-normalized on load",
                          stacklevel=2)
        return cls(A, data["offsets"])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"Polyhedron(dim={self.dim}, n_faces={self.n_faces})"


def _comb(n, k):
    from math import comb
    return comb(n, k)


def box_normal_cone_contains(w, lower, upper, v, tol=DEFAULT_TOL):
    """Distance of ``v`` from the normal cone of the box at ``w``."""
    w, v = np.asarray(w, float), np.asarray(v, float)
    at_up = w >= upper - tol
    at_lo = w <= lower + tol
    proj = np.where(at_up & ~at_lo, np.maximum(v, 0.0),
                    np.where(at_lo & ~at_up, np.minimum(v, 0.0),
                             np.where(at_up & at_lo, v, 0.0)))
    return float(np.linalg.norm(v - proj))
