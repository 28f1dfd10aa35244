import itertools

import numpy as np
import pytest

from tstop.qp import solve_qp


def brute_force_qp(H, q, A, b, G, u):
    """Active-set enumeration oracle for small dense strictly convex QPs."""
    n = q.size
    me = 0 if A is None else A.shape[0]
    best, bx = np.inf, None
    m = G.shape[0]
    for r in range(0, n + 1):
        for S in itertools.combinations(range(m), r):
            GS = G[list(S)]
            nA = A if me else np.zeros((0, n))
            M = np.vstack([nA, GS])
            K = np.zeros((n + M.shape[0], n + M.shape[0]))
            K[:n, :n] = H
            K[:n, n:] = M.T
            K[n:, :n] = M
            rhs = np.concatenate([-q, b if me else np.zeros(0), u[list(S)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.linalg.norm(K @ sol - rhs, np.inf) > 1e-8:
                continue
            x = sol[:n]
            lam_in = sol[n + me:]
            if np.all(G @ x <= u + 1e-9) and np.all(lam_in >= -1e-9):
                val = 0.5 * x @ H @ x + q @ x
                if val < best:
                    best, bx = val, x
    return best, bx


def test_random_qps_match_active_set_enumeration():
    rng = np.random.default_rng(0)
    for trial in range(40):
        n = int(rng.integers(2, 6))
        L = rng.normal(size=(n, n))
        H = L @ L.T + np.eye(n)
        q = rng.normal(size=n)
        G = np.vstack([np.eye(n), -np.eye(n)])
        u = np.ones(2 * n)
        me = int(rng.integers(0, 2))
        A = rng.normal(size=(me, n)) if me else None
        b = np.zeros(me) if me else None
        res = solve_qp(H, q, A, b, G, u, tol=1e-10)
        assert res.status == "solved", trial
        best, bx = brute_force_qp(H, q, A, b, G, u)
        val = 0.5 * res.x @ H @ res.x + q @ res.x
        assert val == pytest.approx(best, abs=1e-7)
        np.testing.assert_allclose(res.x, bx, atol=1e-6)


def test_equality_only_qp_closed_form():
    rng = np.random.default_rng(1)
    n, me = 5, 2
    L = rng.normal(size=(n, n))
    H = L @ L.T + np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(me, n))
    b = rng.normal(size=me)
    res = solve_qp(H, q, A, b, None, None)
    assert res.status == "solved"
    K = np.block([[H, A.T], [A, np.zeros((me, me))]])
    sol = np.linalg.solve(K, np.concatenate([-q, b]))
    np.testing.assert_allclose(res.x, sol[:n], atol=1e-8)


def test_qp_duals_satisfy_kkt():
    rng = np.random.default_rng(2)
    n = 6
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.5 * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(2, n))
    b = rng.normal(size=2)
    G = np.vstack([np.eye(n), -np.eye(n)])
    u = np.full(2 * n, 2.0)
    res = solve_qp(H, q, A, b, G, u, tol=1e-11)
    assert res.status == "solved"
    grad = H @ res.x + q + A.T @ res.y + G.T @ res.w
    assert np.linalg.norm(grad, np.inf) < 1e-8
    assert np.all(res.w >= -1e-12)
    slack = u - G @ res.x
    assert np.all(slack >= -1e-9)
    assert np.max(np.abs(res.w * slack)) < 1e-7


def test_qp_sparse_inputs():
    import scipy.sparse as sp
    rng = np.random.default_rng(3)
    n = 40
    H = sp.eye(n, format="csr")
    q = rng.normal(size=n)
    G = sp.vstack([sp.eye(n), -sp.eye(n)], format="csr")
    u = np.ones(2 * n) * 0.4
    res = solve_qp(H, q, None, None, G, u)
    assert res.status == "solved"
    np.testing.assert_allclose(res.x, np.clip(-q, -0.4, 0.4), atol=1e-7)
