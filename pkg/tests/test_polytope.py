import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crawlopt import Polyhedron
from crawlopt.exceptions import InfeasiblePolyhedron, PointOutside
from crawlopt.polytope import box_normal_cone_contains

from oracles import enumerate_projection


def random_polyhedron(rng, n, extra):
    """Unit box cut by ``extra`` random halfspaces through a shrunk box."""
    A = [np.eye(n), -np.eye(n)]
    c = [np.ones(n), np.ones(n)]
    for _ in range(extra):
        a = rng.normal(size=(1, n))
        a /= np.linalg.norm(a)
        A.append(a)
        c.append([rng.uniform(0.2, 1.0)])
    return Polyhedron(np.vstack(A), np.concatenate(c))


def test_active_set_interior_is_empty():
    P = Polyhedron.box([0, 0], [1, 1])
    assert len(P.active_set([0.5, 0.5])) == 0


def test_active_set_corner():
    P = Polyhedron.box([0, 0], [1, 1])
    act = P.active_set([1.0, 1.0])
    assert set(act) == {0, 1}


def test_active_set_interval_upper_face():
    P = Polyhedron.interval(0, 1)
    assert tuple(P.active_set([1.0])) == (0,)


def test_active_set_outside_raises():
    P = Polyhedron.interval(0, 1)
    with pytest.raises(PointOutside):
        P.active_set([1.5])


def test_project_identity_inside():
    P = Polyhedron.box([0, 0], [1, 1])
    p, dec = P.project([0.3, 0.7])
    assert np.array_equal(p, [0.3, 0.7])
    assert dec.coefficients == {}


def test_project_clamp():
    P = Polyhedron.interval(0, 1)
    p, dec = P.project([1.5])
    assert p[0] == pytest.approx(1.0)
    assert dec.coefficients[0] == pytest.approx(0.5)


def test_project_cut_box_matches_enumeration():
    A = np.vstack([np.eye(2), -np.eye(2), [[1.0, 1.0]]])
    c = np.array([1, 1, 0, 0, 1.5])
    P = Polyhedron(A, c)
    p, _ = P.project([1.2, 1.2])
    assert np.allclose(p, [0.75, 0.75], atol=1e-12)
    assert np.allclose(p, enumerate_projection(A, c, [1.2, 1.2]), atol=1e-12)


def test_normal_cone_coeffs_examples():
    P = Polyhedron.interval(0, 1)
    dec = P.normal_cone_coeffs([1.0], [2.0])
    assert dec.feasible and dec.coefficients[0] == pytest.approx(2.0)
    dec = P.normal_cone_coeffs([0.5], [0.0])
    assert dec.coefficients == {} and dec.residual == 0.0
    assert not P.normal_cone_coeffs([1.0], [-1.0]).feasible


def test_plicq():
    P = Polyhedron.box([0, 0], [1, 1])
    assert P.check_plicq([1.0, 1.0])
    # redundant lower faces are inactive at the upper end
    Q = Polyhedron(np.array([[1.0], [-1.0], [-1.0]]), [1.0, 0.0, -0.5])
    assert Q.check_plicq([1.0])
    R = Polyhedron(np.array([[1.0, 0.0], [-1.0, 0.0], [0, 1], [0, -1]]),
                   [1.0, 0.0, 1.0, 1.0])
    assert R.check_plicq([1.0, 0.0])


def test_plicq_false_for_opposing_tight_faces():
    # both faces of a thin slab count as active at a loose tolerance
    P = Polyhedron(np.array([[1.0], [-1.0]]), [1.0, -0.999])
    assert not P.check_plicq([0.9995], tol=1e-3)


def test_empty_interior_construction_error():
    with pytest.raises(InfeasiblePolyhedron):
        Polyhedron(np.array([[1.0], [-1.0]]), [0.0, 0.0])


def test_normals_are_normalized():
    P = Polyhedron(np.array([[2.0, 0.0], [0.0, -3.0]]), [2.0, 3.0])
    assert np.allclose(np.linalg.norm(P.normals, axis=1), 1.0)
    assert np.allclose(P.offsets, [1.0, 1.0])


def test_json_roundtrip():
    P = Polyhedron.box([0, -1], [2, 1])
    Q = Polyhedron.from_json(P.to_json())
    assert np.array_equal(P.normals, Q.normals)
    assert np.array_equal(P.offsets, Q.offsets)


def test_project_batch_matches_single():
    rng = np.random.default_rng(1)
    P = random_polyhedron(rng, 3, 3)
    Y = rng.normal(scale=2.0, size=(40, 3))
    batch = P.project_batch(Y)
    single = np.array([P.project(y)[0] for y in Y])
    assert np.allclose(batch, single, atol=1e-10)


def test_box_normal_cone_distance():
    lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    assert box_normal_cone_contains([1.0, 0.0], lo, hi, [2.0, 0.0]) == 0.0
    assert box_normal_cone_contains([1.0, 0.0], lo, hi,
                                    [-2.0, 0.0]) == pytest.approx(2.0)
    assert box_normal_cone_contains([0.0, 0.0], lo, hi,
                                    [0.0, 0.5]) == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 3),
       extra=st.integers(0, 3))
def test_projection_matches_enumeration(seed, n, extra):
    rng = np.random.default_rng(seed)
    P = random_polyhedron(rng, n, extra)
    y = rng.normal(scale=2.0, size=n)
    p, dec = P.project(y)
    ref = enumerate_projection(P.normals, P.offsets, y)
    assert np.allclose(p, ref, atol=1e-9)
    assert P.contains(p)
    assert dec.feasible


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 3))
def test_active_set_definition(seed, n):
    rng = np.random.default_rng(seed)
    P = random_polyhedron(rng, n, 2)
    x, _ = P.project(rng.normal(scale=2.0, size=n))
    act = set(P.active_set(x))
    slack = P.offsets - P.normals @ x
    assert act == set(np.flatnonzero(slack <= 1e-9).tolist())


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_decomposition_residual_definition(seed):
    rng = np.random.default_rng(seed)
    P = Polyhedron.box([0, 0, 0], [1, 1, 1])
    x = np.array([1.0, 0.0, rng.uniform(0.1, 0.9)])
    v = rng.normal(size=3)
    dec = P.normal_cone_coeffs(x, v)
    lam = dec.as_array(P.n_faces)
    assert dec.residual == pytest.approx(
        np.linalg.norm(v - P.normals.T @ lam), abs=1e-12)
    assert np.all(lam >= 0)
    inside = v[0] >= 0 and v[1] <= 0 and abs(v[2]) < 1e-15
    assert dec.feasible == inside
