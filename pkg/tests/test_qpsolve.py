import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gridrestore.qpsolve import (INFEASIBLE, OPTIMAL, PreparedQP, QPInstance, kkt_residuals,
                                 solve_qp)


def qp(P, q, A=None, b=None, G=None, h=None, lb=None, ub=None, const=0.0):
    n = len(q)
    A = np.zeros((0, n)) if A is None else np.atleast_2d(A)
    G = np.zeros((0, n)) if G is None else np.atleast_2d(G)
    return QPInstance(P=sp.csc_matrix(np.atleast_2d(P)), q=np.asarray(q, float),
                      A=sp.csr_matrix(A), b=np.asarray([] if b is None else b, float),
                      G=sp.csr_matrix(G), h=np.asarray([] if h is None else h, float),
                      lb=np.full(n, -np.inf) if lb is None else np.asarray(lb, float),
                      ub=np.full(n, np.inf) if ub is None else np.asarray(ub, float), const=const)


def test_unconstrained_square():
    sol = solve_qp(qp([[2.0]], [0.0]))
    assert sol.status == OPTIMAL
    assert abs(sol.x[0]) < 1e-6 and abs(sol.objective) < 1e-9


def test_clipped_minimizer():
    # (x - 3)^2 = x^2 - 6x + 9
    sol = solve_qp(qp([[2.0]], [-6.0], G=[[1.0]], h=[2.0], const=9.0))
    assert sol.optimal
    assert sol.x[0] == pytest.approx(2.0, abs=1e-6)
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    assert sol.z[0] >= 0


def test_symmetric_equality():
    inst = qp(2 * np.eye(2), [0.0, 0.0], A=[[1.0, 1.0]], b=[2.0])
    sol = solve_qp(inst)
    assert np.allclose(sol.x, [1.0, 1.0], atol=1e-6)
    assert sol.objective == pytest.approx(2.0, abs=1e-6)
    # Exact KKT point of the same problem.
    res = kkt_residuals(inst, np.array([1.0, 1.0]), y=np.array([-2.0]))
    assert max(res) <= 1e-9


def test_residual_is_gradient_at_zero():
    inst = qp([[2.0]], [-6.0], G=[[1.0]], h=[2.0], const=9.0)
    stat, primal, comp = kkt_residuals(inst, np.array([0.0]))
    assert stat == pytest.approx(6.0)
    assert primal == 0.0


def test_residual_matches_finite_differences(rng):
    n = 5
    M = rng.normal(size=(n, n))
    P = M @ M.T + np.eye(n)
    q = rng.normal(size=n)
    inst = qp(P, q, lb=-np.ones(n), ub=np.ones(n))
    x = rng.uniform(-0.5, 0.5, size=n)
    h = 1e-6
    fd = np.array([(inst.objective(x + h * e) - inst.objective(x - h * e)) / (2 * h)
                    for e in np.eye(n)])
    stat, primal, _ = kkt_residuals(inst, x)
    assert primal == 0.0
    assert stat == pytest.approx(np.max(np.abs(fd)), abs=1e-6)


def test_fixed_variables_and_infeasible_rows():
    # x1 fixed at 1 by its bounds; x0 + x1 = 3
    inst = qp(np.eye(2), [0.0, 0.0], A=[[1.0, 1.0]], b=[3.0], lb=[-5, 1.0], ub=[5, 1.0])
    sol = solve_qp(inst)
    assert sol.optimal and np.allclose(sol.x, [2.0, 1.0], atol=1e-6)
    bad = qp(np.eye(1), [0.0], A=[[0.0]], b=[1.0])
    assert solve_qp(bad).status == INFEASIBLE


def test_infeasible_bounds():
    inst = qp(np.eye(1), [0.0], G=[[1.0], [-1.0]], h=[-1.0, -1.0])
    assert solve_qp(inst).status != OPTIMAL


def test_prepared_reuse_matches_fresh_solve(rng):
    n = 6
    G = rng.normal(size=(4, n))
    base = qp(np.zeros((n, n)), rng.normal(size=n), G=G, h=np.ones(4), lb=-np.ones(n),
              ub=np.ones(n))
    prep = PreparedQP(base)
    for _ in range(3):
        d = rng.uniform(0.5, 2.0, size=n)
        q = rng.normal(size=n)
        fresh = solve_qp(qp(np.diag(d), q, G=G, h=np.ones(4), lb=-np.ones(n), ub=np.ones(n)))
        again = prep.solve(sp.diags(d), q, 0.0)
        assert np.allclose(fresh.x, again.x, atol=1e-12)


def test_repeated_solves_bit_identical(rng):
    n = 4
    inst = qp(np.eye(n), rng.normal(size=n), A=np.ones((1, n)), b=[1.0], lb=np.zeros(n),
              ub=np.ones(n))
    a, b = solve_qp(inst), solve_qp(inst)
    assert a.x.tobytes() == b.x.tobytes()


def test_asymmetric_rejected():
    with pytest.raises(ValueError):
        solve_qp(qp([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0]))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_optimum_beats_feasible_samples(seed):
    rng = np.random.default_rng(seed)
    n = 4
    M = rng.normal(size=(n, n))
    P = M @ M.T
    q = rng.normal(size=n)
    G = rng.normal(size=(3, n))
    h = rng.uniform(0.5, 2.0, size=3)      # x = 0 is strictly feasible
    lb, ub = -np.ones(n), np.ones(n)
    inst = qp(P, q, G=G, h=h, lb=lb, ub=ub)
    sol = solve_qp(inst)
    assert sol.optimal
    assert np.all(sol.z >= 0) and np.all(sol.z_lb >= 0) and np.all(sol.z_ub >= 0)
    pts = rng.uniform(-1, 1, size=(1000, n))
    feas = pts[np.all(pts @ G.T <= h, axis=1)]
    vals = 0.5 * np.einsum("ij,jk,ik->i", feas, P, feas) + feas @ q
    assert sol.objective <= vals.min() + 1e-6
