"""Convex QP subproblem solver: primal-dual interior point (Mehrotra).

Solves
    min 0.5 x'Hx + q'x   s.t.  A x = b,  G x <= u
for PSD H. The condensed KKT system is factorized once per iteration, dense
below a size threshold and with SuperLU above it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

Array = np.ndarray


@dataclass
class QPResult:
    x: Array
    y: Array        # equality multipliers
    w: Array        # inequality multipliers (>= 0)
    s: Array        # inequality slacks (>= 0)
    status: str     # "solved" | "max_iter" | "failed"
    iterations: int
    gap: float
    res_primal: float
    res_dual: float


def _as_csr(M, shape=None):
    if M is None:
        return sp.csr_matrix(shape)
    if sp.issparse(M):
        return M.tocsr()
    return sp.csr_matrix(np.atleast_2d(M))


def solve_qp(
    H,
    q: Array,
    A=None,
    b: Optional[Array] = None,
    G=None,
    u: Optional[Array] = None,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> QPResult:
    q = np.asarray(q, dtype=float).ravel()
    n = q.size
    H = _as_csr(H, (n, n))
    A = _as_csr(A, (0, n))
    G = _as_csr(G, (0, n))
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float).ravel()
    me, mi = A.shape[0], G.shape[0]

    if mi == 0:
        return _solve_equality_qp(H, q, A, b, tol)

    # starting point: x = 0, slacks clear of the boundary, unit duals
    x = np.zeros(n)
    s = np.maximum(1.0, np.abs(u))
    w = np.ones(mi)
    y = np.zeros(me)

    scale = 1.0 + max(np.linalg.norm(q, np.inf),
                      np.linalg.norm(b, np.inf) if me else 0.0,
                      np.linalg.norm(u, np.inf) if mi else 0.0)

    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        r_d = H @ x + q + A.T @ y + G.T @ w
        r_p = A @ x - b
        r_g = G @ x + s - u
        gap = float(s @ w) / mi
        comp_max = float(np.max(s * w))

        res_d = np.linalg.norm(r_d, np.inf)
        res_p = max(np.linalg.norm(r_p, np.inf) if me else 0.0,
                    np.linalg.norm(r_g, np.inf))
        if res_d <= tol * scale and res_p <= tol * scale and comp_max <= tol * scale:
            status = "solved"
            break
        # divergence: complementarity collapses while residuals stay large
        if res_d > 1e9 * scale or (gap < 1e-13 * scale
                                   and max(res_d, res_p) > 1e3 * tol * scale):
            return QPResult(x, y, w, s, "failed", it, gap, res_p, res_d)

        d = w / s
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(r_d))):
            return QPResult(x, y, w, s, "failed", it, gap, res_p, res_d)
        Hbar = (H + G.T @ sp.diags(d) @ G).tocsc()
        reg = 1e-12 * scale
        if me:
            K = sp.bmat(
                [[Hbar + reg * sp.eye(n), A.T], [A, -reg * sp.eye(me)]],
                format="csc",
            )
        else:
            K = (Hbar + reg * sp.eye(n)).tocsc()
        try:
            lu = spla.splu(K)
        except RuntimeError:
            return QPResult(x, y, w, s, "failed", it, gap, res_p, res_d)

        def solve_kkt(rhs):
            return lu.solve(rhs)

        def kkt_step(t):
            # eliminate (ds, dw); t is the Newton target for s .* w
            rhs1 = -r_d + G.T @ (w - (t + w * r_g) / s)
            rhs = np.concatenate([rhs1, -r_p]) if me else rhs1
            if not np.all(np.isfinite(rhs)):
                raise FloatingPointError("non-finite KKT right-hand side")
            sol = solve_kkt(rhs)
            dx = sol[:n]
            dy = sol[n:] if me else np.zeros(0)
            ds = -r_g - G @ dx
            dw = (t - w * ds) / s - w
            return dx, dy, ds, dw

        # predictor (affine scaling)
        try:
            dx_a, dy_a, ds_a, dw_a = kkt_step(np.zeros(mi))
            a_p = _max_step(s, ds_a)
            a_d = _max_step(w, dw_a)
            gap_aff = float((s + a_p * ds_a) @ (w + a_d * dw_a)) / mi
            sigma = (max(gap_aff, 0.0) / gap) ** 3 if gap > 0 else 0.0
            if max(res_p, res_d) > 10.0 * gap:
                # keep centered until the residuals catch up with the gap
                sigma = max(sigma, 0.1)
            # corrector
            t_corr = sigma * gap - ds_a * dw_a
            dx, dy, ds, dw = kkt_step(t_corr)
        except (FloatingPointError, ValueError):
            return QPResult(x, y, w, s, "failed", it, gap, res_p, res_d)
        frac = 0.995 if it > 2 else 0.9
        a_p = frac * _max_step(s, ds)
        a_d = frac * _max_step(w, dw)
        x = x + a_p * dx
        s = s + a_p * ds
        y = y + a_d * dy
        w = w + a_d * dw
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            return QPResult(x, y, w, s, "failed", it, gap, res_p, res_d)

    r_d = H @ x + q + A.T @ y + G.T @ w
    r_p = A @ x - b
    r_g = G @ x + s - u
    return QPResult(
        x=x, y=y, w=w, s=s, status=status, iterations=it,
        gap=float(s @ w) / mi,
        res_primal=max(np.linalg.norm(r_p, np.inf) if me else 0.0,
                       np.linalg.norm(r_g, np.inf)),
        res_dual=float(np.linalg.norm(r_d, np.inf)),
    )


def _max_step(v: Array, dv: Array) -> float:
    """Largest alpha in (0, 1] keeping v + alpha dv > 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _solve_equality_qp(H, q, A, b, tol) -> QPResult:
    n = q.size
    me = A.shape[0]
    K = np.zeros((n + me, n + me))
    K[:n, :n] = H.toarray() + 1e-12 * np.eye(n)
    if me:
        Ad = A.toarray()
        K[:n, n:] = Ad.T
        K[n:, :n] = Ad
    rhs = np.concatenate([-q, b])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return QPResult(np.zeros(n), np.zeros(me), np.zeros(0), np.zeros(0),
                        "failed", 0, 0.0, np.inf, np.inf)
    x, y = sol[:n], sol[n:]
    r_d = H @ x + q + (A.T @ y if me else 0.0)
    r_p = (A @ x - b) if me else np.zeros(0)
    return QPResult(x, y, np.zeros(0), np.zeros(0), "solved", 1, 0.0,
                    float(np.linalg.norm(r_p, np.inf)) if me else 0.0,
                    float(np.linalg.norm(r_d, np.inf)))
