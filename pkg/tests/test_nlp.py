import numpy as np
import pytest
import scipy.sparse as sp

from tstop.nlp import NLP, solve_nlp
from tstop.qp import solve_qp


def _quadratic_nlp(H, q, A, b, G, u):
    """Wrap a QP in the NLP container (quadratic objective, affine constraints)."""
    n = q.size
    me = 0 if A is None else A.shape[0]
    mi = 0 if G is None else G.shape[0]
    As = sp.csr_matrix(A if me else np.zeros((0, n)))
    Gs = sp.csr_matrix(G if mi else np.zeros((0, n)))

    def eval_eq(x):
        return (As @ x - (b if me else np.zeros(0))), As

    def eval_ineq(x):
        return (Gs @ x - (u if mi else np.zeros(0))), Gs

    def lag_hess(x, lam, mu):
        return sp.csr_matrix((n, n))

    return NLP(n=n, c=q, Q0=sp.csr_matrix(H), eval_eq=eval_eq,
               eval_ineq=eval_ineq, lag_hess=lag_hess)


def test_convex_qp_against_enumeration_oracle():
    from tests.test_qp import brute_force_qp
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        L = rng.normal(size=(n, n))
        H = L @ L.T + np.eye(n)
        q = rng.normal(size=n)
        G = np.vstack([np.eye(n), -np.eye(n)])
        u = np.ones(2 * n)
        nlp = _quadratic_nlp(H, q, None, None, G, u)
        sol = solve_nlp(nlp, np.zeros(n), tol=1e-9)
        assert sol.solved
        best, bx = brute_force_qp(H, q, None, None, G, u)
        np.testing.assert_allclose(sol.x, bx, atol=1e-6)


def test_equality_only_quadratic_newton_exact():
    rng = np.random.default_rng(1)
    n, me = 5, 2
    L = rng.normal(size=(n, n))
    H = L @ L.T + np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(me, n))
    b = rng.normal(size=me)
    nlp = _quadratic_nlp(H, q, A, b, None, None)
    sol = solve_nlp(nlp, np.zeros(n), tol=1e-10)
    assert sol.solved
    K = np.block([[H, A.T], [A, np.zeros((me, me))]])
    closed = np.linalg.solve(K, np.concatenate([-q, b]))
    np.testing.assert_allclose(sol.x, closed[:n], atol=1e-7)


def test_warm_start_at_optimum_exits_immediately():
    rng = np.random.default_rng(2)
    n = 4
    L = rng.normal(size=(n, n))
    H = L @ L.T + np.eye(n)
    q = rng.normal(size=n)
    G = np.vstack([np.eye(n), -np.eye(n)])
    u = np.ones(2 * n)
    nlp = _quadratic_nlp(H, q, None, None, G, u)
    first = solve_nlp(nlp, np.zeros(n), tol=1e-9)
    assert first.solved
    again = solve_nlp(nlp, np.zeros(n), warm=first, tol=1e-9)
    assert again.solved and again.iterations <= 2


def test_nonlinear_equality_projection():
    # min x + y  s.t.  x^2 + y^2 = 2: optimum at (-1, -1)
    def eval_eq(x):
        g = np.array([x[0] ** 2 + x[1] ** 2 - 2.0])
        J = sp.csr_matrix(np.array([[2 * x[0], 2 * x[1]]]))
        return g, J

    def eval_ineq(x):
        return np.zeros(0), sp.csr_matrix((0, 2))

    def lag_hess(x, lam, mu):
        return sp.csr_matrix(max(lam[0] * 2.0, 0.0) * np.eye(2))

    nlp = NLP(n=2, c=np.array([1.0, 1.0]), eval_eq=eval_eq,
              eval_ineq=eval_ineq, lag_hess=lag_hess)
    sol = solve_nlp(nlp, np.array([1.3, 0.2]), tol=1e-9, max_iter=100)
    assert sol.solved
    np.testing.assert_allclose(sol.x, [-1.0, -1.0], atol=1e-6)


def test_infeasible_inequalities_reported():
    # x <= -1 and x >= 1 simultaneously
    G = np.array([[1.0], [-1.0]])
    u = np.array([-1.0, -1.0])
    nlp = _quadratic_nlp(np.eye(1), np.zeros(1), None, None, G, u)
    sol = solve_nlp(nlp, np.zeros(1), tol=1e-9, max_iter=30)
    assert sol.status == "infeasible"
