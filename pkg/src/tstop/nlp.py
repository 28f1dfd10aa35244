"""In-repo SQP core for sparse nonlinear programs.

Problems carry a linear (optionally quadratic) objective, callable constraint
evaluators with sparse Jacobians, and a Lagrangian-curvature callback that
returns a PSD approximation. Globalization is an l1-penalty line search; QPs
that the interior-point subsolver cannot handle fall back to an elastic
reformulation with hard equalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .qp import solve_qp

Array = np.ndarray


@dataclass
class NLP:
    """min c'x + 0.5 x'Q0 x  s.t.  eq(x) = 0, ineq(x) <= 0."""

    n: int
    c: Array
    eval_eq: Callable[[Array], tuple[Array, sp.spmatrix]]
    eval_ineq: Callable[[Array], tuple[Array, sp.spmatrix]]
    lag_hess: Callable[[Array, Array, Array], sp.spmatrix]
    Q0: Optional[sp.spmatrix] = None
    eq_values: Optional[Callable[[Array], Array]] = None
    ineq_values: Optional[Callable[[Array], Array]] = None
    meta: dict = field(default_factory=dict)

    def objective(self, x: Array) -> float:
        val = float(self.c @ x)
        if self.Q0 is not None:
            val += 0.5 * float(x @ (self.Q0 @ x))
        return val

    def objective_grad(self, x: Array) -> Array:
        g = self.c.copy()
        if self.Q0 is not None:
            g = g + self.Q0 @ x
        return g

    def _eq_vals(self, x: Array) -> Array:
        if self.eq_values is not None:
            return self.eq_values(x)
        return self.eval_eq(x)[0]

    def _ineq_vals(self, x: Array) -> Array:
        if self.ineq_values is not None:
            return self.ineq_values(x)
        return self.eval_ineq(x)[0]


@dataclass
class NominalOCPSolution:
    """Primal-dual output of solve_nlp."""

    x: Array
    lam: Array
    mu: Array
    status: str           # "solved" | "max_iter" | "infeasible"
    kkt_residual: float
    iterations: int
    objective: float = 0.0

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def kkt_measures(nlp: NLP, x: Array, lam: Array, mu: Array,
                 g: Array, Jg, h: Array, Jh) -> tuple[float, float, float, float]:
    """(stationarity, eq violation, ineq violation, complementarity), inf norms."""
    grad = nlp.objective_grad(x)
    if g.size:
        grad = grad + Jg.T @ lam
    if h.size:
        grad = grad + Jh.T @ mu
    stat = float(np.linalg.norm(grad, np.inf))
    feas_eq = float(np.linalg.norm(g, np.inf)) if g.size else 0.0
    feas_in = float(np.max(np.maximum(h, 0.0))) if h.size else 0.0
    comp = float(np.max(np.abs(np.minimum(mu, -h)))) if h.size else 0.0
    return stat, feas_eq, feas_in, comp


def _merit(nlp: NLP, x: Array, nu: float) -> float:
    g = nlp._eq_vals(x)
    h = nlp._ineq_vals(x)
    viol = (np.abs(g).sum() if g.size else 0.0) + (np.maximum(h, 0.0).sum() if h.size else 0.0)
    return nlp.objective(x) + nu * viol


def _second_order_correction(nlp: NLP, x_trial: Array, Jg, Jh) -> Optional[Array]:
    """Minimum-norm correction of the constraint residuals at the trial point.

    Counters the Maratos effect: the full step picks up O(|d|^2) violation on
    curved constraints that blocks the l1 merit test even though the step is
    good. Residuals of equalities and of violated inequalities are corrected
    through the Jacobians of the current iterate.
    """
    g_new = nlp._eq_vals(x_trial)
    h_new = nlp._ineq_vals(x_trial)
    act = h_new > 0.0
    rows = []
    resid = []
    if g_new.size:
        rows.append(Jg)
        resid.append(g_new)
    if np.any(act):
        rows.append(Jh[np.where(act)[0]])
        resid.append(h_new[act])
    if not rows:
        return None
    C = sp.vstack(rows, format="csc")
    r = np.concatenate(resid)
    m = C.shape[0]
    n = C.shape[1]
    K = sp.bmat([[sp.eye(n), C.T], [C, -1e-10 * sp.eye(m)]], format="csc")
    try:
        sol = sp.linalg.splu(K).solve(np.concatenate([np.zeros(n), -r]))
    except (RuntimeError, ValueError):
        return None
    dc = sol[:n]
    if not np.all(np.isfinite(dc)):
        return None
    return dc


def _solve_elastic(H, grad, Jg, g, Jh, h, penalty: float, tol: float):
    """Elastic QP: both constraint families relaxed by penalized slacks.

    Variables [d, t, r+, r-] with Jh d - t <= -h, t >= 0 and
    Jg d + r+ - r- = -g, r+- >= 0; returns the total relaxation so the caller
    can distinguish a conditioning rescue from genuine inconsistency.
    """
    n = grad.size
    mi = h.size
    me = g.size
    # slack curvature comparable to H keeps the condensed KKT well conditioned
    slack_curv = max(1e-8, float(np.mean(H.diagonal())))
    He = sp.block_diag([H, slack_curv * sp.eye(mi + 2 * me)], format="csr")
    qe = np.concatenate([grad, penalty * np.ones(mi + 2 * me)])
    Ae = None
    if me:
        Ae = sp.hstack([Jg, sp.csr_matrix((me, mi)), sp.eye(me), -sp.eye(me)],
                       format="csr")
    blocks = [[Jh, -sp.eye(mi), None, None] if me else [Jh, -sp.eye(mi)],
              [None, -sp.eye(mi), None, None] if me else [None, -sp.eye(mi)]]
    if me:
        blocks.append([None, None, -sp.eye(me), None])
        blocks.append([None, None, None, -sp.eye(me)])
    Ge = sp.bmat(blocks, format="csr")
    ue = np.concatenate([-h, np.zeros(mi + 2 * me)])
    res = solve_qp(He, qe, Ae, -g if me else None, Ge, ue, tol=tol)
    d = res.x[:n]
    t = res.x[n:n + mi]
    r = res.x[n + mi:]
    w = res.w[:mi] if res.w.size else np.zeros(mi)
    return res, d, np.concatenate([t, r]), w


def solve_nlp(
    nlp: NLP,
    x0: Array,
    warm: Optional[NominalOCPSolution] = None,
    tol: float = 1e-7,
    max_iter: int = 80,
    prox_init: float = 1e-6,
    qp_tol: Optional[float] = None,
    callback: Optional[Callable] = None,
    trace: Optional[list] = None,
) -> NominalOCPSolution:
    """SQP with exact constraint Jacobians and an l1 merit line search.

    A Levenberg-style proximal term delta * I regularizes the QP; delta grows
    when a step is rejected (the QP is re-solved within the same iteration)
    and shrinks on full steps, so it vanishes near the solution. The warm
    start reuses a previous primal-dual point; at an optimum the method exits
    immediately on the KKT test.
    """
    if qp_tol is None:
        qp_tol = min(1e-9, 1e-3 * tol)
    x = np.array(warm.x if warm is not None else x0, dtype=float)
    g, Jg = nlp.eval_eq(x)
    h, Jh = nlp.eval_ineq(x)
    me, mi = g.size, h.size
    lam = np.array(warm.lam, dtype=float) if warm is not None and warm.lam.size == me else np.zeros(me)
    mu = np.array(warm.mu, dtype=float) if warm is not None and warm.mu.size == mi else np.zeros(mi)
    mu = np.maximum(mu, 0.0)

    nu = 1.0
    delta = prox_init
    status = "max_iter"
    kkt = np.inf
    it = 0
    tiny_steps = 0

    for it in range(max_iter + 1):
        stat, feq, fin, comp = kkt_measures(nlp, x, lam, mu, g, Jg, h, Jh)
        kkt = max(stat, feq, fin, comp)
        if callback is not None:
            callback(it, x, kkt)
        if kkt <= tol:
            status = "solved"
            return NominalOCPSolution(x, lam, mu, status, kkt, it, nlp.objective(x))
        if it == max_iter:
            break

        H_base = nlp.lag_hess(x, lam, mu)
        if nlp.Q0 is not None:
            H_base = H_base + nlp.Q0
        grad = nlp.objective_grad(x)
        viol0 = (np.abs(g).sum() if me else 0.0) + (np.maximum(h, 0.0).sum() if mi else 0.0)

        accepted = False
        alpha = 0.0
        d = np.zeros(nlp.n)
        lam_qp, mu_qp = lam, mu
        pending = None
        elastic_budget = 1
        for _attempt in range(8):
            H = (H_base + delta * sp.eye(nlp.n)).tocsr()
            qp = solve_qp(H, grad, Jg if me else None, -g if me else None,
                          Jh if mi else None, -h if mi else None, tol=qp_tol)
            elastic_step = False
            resid_pred = 0.0
            if qp.status != "solved" and \
                    max(qp.res_primal, qp.res_dual, qp.gap) <= \
                    min(1e-6, 1e-2 * max(kkt, tol)):
                # accurate enough relative to the outer residual
                qp.status = "solved"
            if qp.status == "solved":
                d, lam_qp, mu_qp = qp.x, qp.y, qp.w
            else:
                # locally inconsistent (or ill-conditioned) linearization:
                # take the least-violation elastic step instead
                if elastic_budget <= 0:
                    delta = max(delta * 10.0, 1e-6)
                    continue
                elastic_budget -= 1
                penalty = 1e3 * (nu + 1.0)
                best = None
                for _ in range(3):
                    qp_e, d_e, t_e, w_e = _solve_elastic(H, grad, Jg, g, Jh, h,
                                                         penalty, qp_tol)
                    if qp_e.status == "solved" and \
                            (best is None or t_e.sum() < best[2].sum()):
                        best = (qp_e, d_e, t_e, w_e)
                        if t_e.sum() <= max(1e-8, 1e-3 * viol0 + 1e-10):
                            break
                    penalty *= 30.0
                if best is None:
                    delta = max(delta * 10.0, 1e-6)
                    continue
                qp_e, d, t_e, w_e = best
                lam_qp, mu_qp = qp_e.y, w_e
                resid_pred = float(t_e.sum())
                elastic_step = True
                if viol0 - resid_pred <= 1e-8 * (1.0 + viol0) and viol0 > tol:
                    # no step can reduce the linearized violation: locally
                    # infeasible (restoration failed)
                    return NominalOCPSolution(x, lam, mu, "infeasible", kkt, it,
                                              nlp.objective(x))

            if elastic_step:
                # elastic duals are penalty-scaled artifacts, not multiplier
                # estimates; never let them inflate the merit penalty
                nu_try = max(nu, 10.0)
            else:
                nu_try = max(nu, 1.05 * max(np.abs(lam_qp).max() if me else 0.0,
                                            np.abs(mu_qp).max() if mi else 0.0) + 0.1)
            phi0 = _merit(nlp, x, nu_try)
            ddir = float(grad @ d) - nu_try * (viol0 - resid_pred)
            noise = 1e-13 * (1.0 + abs(phi0))
            alpha = 1.0
            soc_step = None
            for trial in range(30):
                phi = _merit(nlp, x + alpha * d, nu_try)
                slope_ok = ddir < 0 and phi <= phi0 + 1e-4 * alpha * ddir + noise
                if slope_ok or phi < phi0 - noise:
                    accepted = True
                    break
                if trial == 0 and not elastic_step:
                    # second-order correction on the rejected full step
                    dc = _second_order_correction(nlp, x + d, Jg, Jh)
                    if dc is not None:
                        phi_soc = _merit(nlp, x + d + dc, nu_try)
                        soc_ok = ddir < 0 and phi_soc <= phi0 + 1e-4 * ddir + noise
                        if soc_ok or phi_soc < phi0 - noise:
                            accepted = True
                            soc_step = dc
                            break
                alpha *= 0.5
                if alpha < 1e-12:
                    break
            if soc_step is not None:
                d = d + soc_step
            if (not accepted or alpha < 1e-3) and not elastic_step:
                # merit progress blocked or microscopic: accept on a strict
                # decrease of the KKT residual at the full step instead
                g_t, Jg_t = nlp.eval_eq(x + d)
                h_t, Jh_t = nlp.eval_ineq(x + d)
                kkt_t = max(kkt_measures(nlp, x + d, lam_qp, mu_qp,
                                         g_t, Jg_t, h_t, Jh_t))
                if kkt_t <= 0.9 * kkt:
                    accepted = True
                    alpha = 1.0
                    pending = (g_t, Jg_t, h_t, Jh_t)
            if accepted:
                nu = nu_try
                break
            delta = min(max(delta * 10.0, 1e-8), 1e10)

        if trace is not None:
            trace.append({"it": it, "kkt": kkt, "delta": delta, "alpha": alpha,
                          "viol": viol0, "accepted": accepted,
                          "elastic": elastic_step, "qp_status": qp.status,
                          "step": float(np.abs(d).max())})
        if not accepted:
            break
        if np.abs(alpha * d).max() < 1e-11 * (1.0 + np.abs(x).max()):
            tiny_steps += 1
            if tiny_steps >= 3:
                break  # stalled at the attainable accuracy
        else:
            tiny_steps = 0

        x = x + alpha * d
        lam = (1.0 - alpha) * lam + alpha * lam_qp
        mu = np.maximum((1.0 - alpha) * mu + alpha * mu_qp, 0.0)
        if alpha >= 0.99:
            delta = max(delta / 5.0, 1e-10)
        elif alpha < 0.1:
            delta = min(delta * 5.0, 1e10)
        if pending is not None:
            g, Jg, h, Jh = pending
        else:
            g, Jg = nlp.eval_eq(x)
            h, Jh = nlp.eval_ineq(x)

    return NominalOCPSolution(x, lam, mu, status, kkt, it, nlp.objective(x))
