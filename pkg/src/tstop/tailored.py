"""Alternating solver: Riccati gain subproblem + frozen-margin nominal OCP.

Each outer iteration maps the nominal solve's inequality multipliers to
variance-equality multipliers, refreshes gains and covariances, checks the
full KKT system of the coupled problem, and re-solves the nominal OCP with
updated margins and gradient corrections, warm-started from the last primal-
dual point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .constraints import ConstraintSet
from .errors import PlannerInfeasible, PlannerMaxIterations
from .gains import (EtaSet, GainSequence, NominalTrajectories,
                    assemble_regularizers, assemble_regularizers_single,
                    gain_stationarity, riccati_recursion, solve_gain_subproblem)
from .model import SystemModel, linearize_traj
from .nlp import NominalOCPSolution, solve_nlp
from .ocp import (FrozenRobustification, SingleStageLayout, TwoStageLayout,
                  gradient_correction, initial_guess_exp, initial_guess_two_stage,
                  transcribe_exp_weighted, transcribe_two_stage)
from .uncertainty import SafetyMarginSet, mu_to_eta, propagate_sequence
from .util import sym

Array = np.ndarray


@dataclass
class Problem:
    """Scenario-independent description of one planning task."""

    model: SystemModel
    cs: ConstraintSet
    s_tf: Array
    v_max: float
    heading_index: Optional[int] = None
    obstacles: Sequence = ()


@dataclass
class SolverConfig:
    R_regu: Array
    R_regu_tf: Array
    sigma: float = 3.0
    eps: float = 1e-8
    N1: int = 30
    N2: int = 30
    t_s: float = 0.02
    kkt_tol: float = 5e-5
    max_outer_iters: int = 30
    gamma: float = 1.015
    nlp_tol: float = 1e-7
    nlp_max_iters: int = 120
    prox_init: float = 1e-2

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.max_outer_iters < 1:
            raise ValueError("kkt_tol must be positive and max_outer_iters >= 1")
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")
        self.R_regu = np.asarray(self.R_regu, dtype=float)
        self.R_regu_tf = np.asarray(self.R_regu_tf, dtype=float)


@dataclass
class DualSet:
    """Multipliers of the robustified problem, grouped by constraint family."""

    lam: Array
    mu_stage1: Array
    mu_stage2: Array
    mu_terminal: Array
    rho: Optional[float]
    eta_stage1: Array
    eta_stage2: Array
    eta_terminal: Array
    mu_full: Array


@dataclass
class RobustPlan:
    """Converged output of the tailored solver."""

    form: str                      # "two_stage" | "single_stage"
    s1: Array
    u1: Array
    K1: Array                      # (N1, n_u, n_s)
    Sigma1: Array                  # (N1+1, n_s, n_s)
    s2: Optional[Array]
    u2: Optional[Array]
    T2: Optional[float]
    margins: SafetyMarginSet       # margins the final nominal solve used
    duals: DualSet
    iterations: int
    kkt_history: list
    kkt_residual: float
    status: str
    s_t0: Array
    Sigma_t0: Array
    x_full: Array
    lam_full: Array
    solve_time_s: float = 0.0
    nlp_iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def N1(self) -> int:
        return self.u1.shape[0]

    def trajectories(self) -> NominalTrajectories:
        return NominalTrajectories(s1=self.s1, u1=self.u1, s2=self.s2,
                                   u2=self.u2, T2=self.T2)


def compute_betas(cs: ConstraintSet, traj: NominalTrajectories, K: Array,
                  sigmas: Array) -> tuple[Array, Array, Array]:
    """Constraint variances at each node from the gains and covariance tube."""
    n_s = cs.n_s
    N1 = traj.u1.shape[0]
    if cs.n_h and N1:
        _, jac1 = cs.eval_stage(traj.s1[:-1], traj.u1)
        w1 = jac1[..., :n_s] + np.einsum("niu,nus->nis", jac1[..., n_s:], K)
        beta1 = np.einsum("nis,nst,nit->ni", w1, sigmas[:N1], w1)
    else:
        beta1 = np.zeros((N1, cs.n_h))
    if traj.two_stage:
        N2 = traj.u2.shape[0]
        if cs.n_h:
            _, jac2 = cs.eval_stage(traj.s2[:-1], traj.u2)
            Kf, Sf = K[N1 - 1], sigmas[N1 - 1]
            w2 = jac2[..., :n_s] + np.einsum("niu,us->nis", jac2[..., n_s:], Kf)
            beta2 = np.einsum("nis,st,nit->ni", w2, Sf, w2)
        else:
            beta2 = np.zeros((N2, cs.n_h))
    else:
        beta2 = np.zeros((0, cs.n_h))
    if cs.n_h_tf:
        _, jt = cs.eval_terminal(traj.terminal_state)
        beta_tf = np.einsum("is,st,it->i", jt, sigmas[N1], jt)
    else:
        beta_tf = np.zeros(0)
    return np.maximum(beta1, 0.0), np.maximum(beta2, 0.0), np.maximum(beta_tf, 0.0)


def _traj_from_solution(layout, x: Array, form: str) -> NominalTrajectories:
    if form == "two_stage":
        S1, U1, S2, U2, T2 = layout.unpack(x)
        return NominalTrajectories(s1=S1, u1=U1, s2=S2, u2=U2, T2=T2)
    S, U, _, _ = layout.unpack(x)
    return NominalTrajectories(s1=S, u1=U)


def _eta_from_mu(layout, mu: Array, beta1, beta2, beta_tf, sigma, eps, form) -> EtaSet:
    if form == "two_stage":
        m1, m2, mt, _rho = layout.split_duals(mu)
        return EtaSet(stage1=mu_to_eta(m1, beta1, sigma, eps),
                      stage2=mu_to_eta(m2, beta2, sigma, eps),
                      terminal=mu_to_eta(mt, beta_tf, sigma, eps))
    ms, mt = layout.split_duals(mu)
    return EtaSet(stage1=mu_to_eta(ms, beta1, sigma, eps),
                  stage2=np.zeros((0, layout.n_h)),
                  terminal=mu_to_eta(mt, beta_tf, sigma, eps))


def _transcribe(problem: Problem, config: SolverConfig, form: str, s_t0: Array,
                margins: SafetyMarginSet, c_bar: Optional[Array], N: int):
    frozen = FrozenRobustification(margins=margins, c_bar=c_bar)
    if form == "two_stage":
        return transcribe_two_stage(problem.model, problem.cs, frozen, s_t0,
                                    problem.s_tf, config.N1, config.N2)
    return transcribe_exp_weighted(problem.model, problem.cs, frozen, s_t0,
                                   problem.s_tf, N, config.gamma)


def _stationarity_rows(nlp, x, lam, mu) -> float:
    g, Jg = nlp.eval_eq(x)
    h, Jh = nlp.eval_ineq(x)
    grad = nlp.c.copy()
    if g.size:
        grad += Jg.T @ lam
    if h.size:
        grad += Jh.T @ mu
    stat = float(np.linalg.norm(grad, np.inf))
    feas_eq = float(np.linalg.norm(g, np.inf)) if g.size else 0.0
    feas_in = float(np.max(np.maximum(h, 0.0))) if h.size else 0.0
    comp = float(np.max(np.abs(np.minimum(mu, -h)))) if h.size else 0.0
    return max(stat, feas_eq, feas_in, comp)


def _full_kkt_residual(problem: Problem, config: SolverConfig, form: str,
                       s_t0: Array, Sigma_t0: Array, x: Array, lam: Array,
                       mu: Array, eta: EtaSet, margins_used: SafetyMarginSet,
                       layout, N: int):
    """Infinity norm over the coupled KKT system at the candidate point.

    The candidate carries the variances beta backing the margins of the last
    nominal solve, so the dual map row mu*sigma/(2 sqrt(beta+eps)) - eta is
    exact by construction and the variance-consistency row H(z, M) - beta
    (with covariances freshly propagated through the candidate gains) exposes
    the remaining alternation gap, alongside the nominal-stationarity row
    evaluated with freshly recomputed correction coefficients.
    """
    model, cs = problem.model, problem.cs
    traj = _traj_from_solution(layout, x, form)
    if form == "two_stage":
        regs = assemble_regularizers(traj, eta, config.R_regu, config.R_regu_tf, cs)
    else:
        regs = assemble_regularizers_single(traj, eta, config.R_regu,
                                            config.R_regu_tf, cs)
    A, B = linearize_traj(model, traj.s1[:-1], traj.u1, model.t_s)
    gains = riccati_recursion(A, B, regs)
    sigmas = propagate_sequence(A, B, gains.K, Sigma_t0, model.Sigma_w)

    beta1, beta2, beta_tf = compute_betas(cs, traj, gains.K, sigmas)
    c_bar_fresh = gradient_correction(model, cs, traj, gains.K, sigmas, eta,
                                      config.R_regu, config.R_regu_tf)
    nlp_check = _transcribe(problem, config, form, s_t0, margins_used,
                            c_bar_fresh, N)
    r_nominal = _stationarity_rows(nlp_check, x, lam, mu)

    r_gain = float(np.max(np.abs(gain_stationarity(A, B, regs, gains, sigmas)))) \
        if traj.u1.shape[0] else 0.0

    # variance-consistency rows H(z, M) - beta
    gap1 = np.abs(beta1 - margins_used.beta1).max() if beta1.size else 0.0
    gap2 = np.abs(beta2 - margins_used.beta2).max() if beta2.size else 0.0
    gapt = np.abs(beta_tf - margins_used.beta_tf).max() if beta_tf.size else 0.0
    r_beta = float(max(gap1, gap2, gapt))

    residual = max(r_nominal, r_gain, r_beta)
    parts = {"nominal": r_nominal, "gain": r_gain, "beta": r_beta}
    margins_fresh = SafetyMarginSet.from_betas(beta1, beta2, beta_tf,
                                               config.sigma, config.eps)
    return residual, parts, gains, sigmas, (beta1, beta2, beta_tf), \
        margins_fresh, c_bar_fresh


def _robustified_rows(layout, mu, eta: EtaSet, beta1, beta2, beta_tf, form):
    if form == "two_stage":
        m1, m2, mt, _ = layout.split_duals(mu)
        mu_rob = np.concatenate([m1.ravel(), m2.ravel(), mt])
        eta_rob = np.concatenate([eta.stage1.ravel(), eta.stage2.ravel(),
                                  eta.terminal])
        beta_rob = np.concatenate([beta1.ravel(), beta2.ravel(), beta_tf])
    else:
        ms, mt = layout.split_duals(mu)
        mu_rob = np.concatenate([ms.ravel(), mt])
        eta_rob = np.concatenate([eta.stage1.ravel(), eta.terminal])
        beta_rob = np.concatenate([beta1.ravel(), beta_tf])
    return mu_rob, eta_rob, beta_rob


def _build_plan(form, layout, problem, config, s_t0, Sigma_t0, sol, eta, gains,
                sigmas, margins_used, kkt_history, parts_history, status,
                solve_time, nlp_iters) -> RobustPlan:
    traj = _traj_from_solution(layout, sol.x, form)
    if form == "two_stage":
        m1, m2, mt, rho = layout.split_duals(sol.mu)
    else:
        m1, mt = layout.split_duals(sol.mu)
        m2, rho = np.zeros((0, layout.n_h)), None
    duals = DualSet(lam=sol.lam, mu_stage1=m1, mu_stage2=m2, mu_terminal=mt,
                    rho=rho, eta_stage1=eta.stage1, eta_stage2=eta.stage2,
                    eta_terminal=eta.terminal, mu_full=sol.mu)
    return RobustPlan(
        form=form, s1=traj.s1, u1=traj.u1, K1=gains.K, Sigma1=sigmas,
        s2=traj.s2, u2=traj.u2, T2=traj.T2, margins=margins_used, duals=duals,
        iterations=len(kkt_history), kkt_history=list(kkt_history),
        kkt_residual=kkt_history[-1] if kkt_history else np.inf, status=status,
        s_t0=np.asarray(s_t0, dtype=float),
        Sigma_t0=np.asarray(Sigma_t0, dtype=float),
        x_full=sol.x, lam_full=sol.lam, solve_time_s=solve_time,
        nlp_iterations=nlp_iters, history=parts_history,
    )


def _alternate(problem: Problem, config: SolverConfig, form: str, s_t0: Array,
               Sigma_t0: Array, N: int, warm: Optional[RobustPlan]) -> RobustPlan:
    t_start = time.perf_counter()
    model, cs = problem.model, problem.cs
    s_t0 = np.asarray(s_t0, dtype=float)
    Sigma_t0 = sym(np.asarray(Sigma_t0, dtype=float))
    n_h, n_h_tf = cs.n_h, cs.n_h_tf
    N1 = config.N1 if form == "two_stage" else N
    N2 = config.N2 if form == "two_stage" else 0

    # bootstrap margins: zero-uncertainty back-offs, or the warm plan's margins.
    # beta_bar tracks H(z, M) of the previous sweep's gains (the denominator of
    # the dual map); before any gains exist the dual map is taken as zero.
    if warm is not None and warm.form == form and warm.margins.stage1.shape == (N1, n_h):
        margins = warm.margins
        beta_bar = (margins.beta1, margins.beta2, margins.beta_tf)
    else:
        margins = SafetyMarginSet.from_betas(
            np.zeros((N1, n_h)), np.zeros((N2, n_h)), np.zeros(n_h_tf),
            config.sigma, config.eps)
        warm = None
        beta_bar = None

    nlp = _transcribe(problem, config, form, s_t0, margins, None, N)
    layout = nlp.meta["layout"]
    if warm is not None:
        x0 = warm.x_full
        warm_sol = NominalOCPSolution(x=warm.x_full, lam=warm.lam_full,
                                      mu=warm.duals.mu_full, status="solved",
                                      kkt_residual=np.inf, iterations=0)
    else:
        if form == "two_stage":
            x0 = initial_guess_two_stage(layout, s_t0, problem.s_tf,
                                         problem.v_max, problem.heading_index,
                                         problem.obstacles)
        else:
            x0 = initial_guess_exp(layout, s_t0, problem.s_tf, problem.v_max,
                                   problem.heading_index, problem.obstacles)
        warm_sol = None

    def inner_tol(last_residual: Optional[float]) -> float:
        # the single-stage L1 problems are large and benefit from inexact
        # early sweeps (the nominal solve only needs to outpace the current
        # outer residual); the two-stage problems are cheap enough to always
        # solve at full tolerance
        if form == "two_stage":
            return config.nlp_tol
        if last_residual is None or not np.isfinite(last_residual):
            return max(config.nlp_tol, 0.05 * config.kkt_tol)
        return float(np.clip(0.02 * last_residual, config.nlp_tol,
                             max(config.nlp_tol, 0.05 * config.kkt_tol)))

    nlp_iters = 0
    sol = solve_nlp(nlp, x0, warm=warm_sol, tol=inner_tol(None),
                    max_iter=config.nlp_max_iters, prox_init=config.prox_init)
    nlp_iters += sol.iterations
    if not _usable(sol, config):
        raise PlannerInfeasible(
            f"initial nominal solve failed ({sol.status}, kkt {sol.kkt_residual:.2e})")

    kkt_history: list = []
    parts_history: list = []
    for outer in range(1, config.max_outer_iters + 1):
        traj = _traj_from_solution(layout, sol.x, form)
        if beta_bar is None:
            eta = EtaSet.zeros(N1, N2, n_h, n_h_tf)
        else:
            eta = _eta_from_mu(layout, sol.mu, beta_bar[0], beta_bar[1],
                               beta_bar[2], config.sigma, config.eps, form)
        residual, parts, gains, sigmas, betas, margins_fresh, c_bar = \
            _full_kkt_residual(problem, config, form, s_t0, Sigma_t0, sol.x,
                               sol.lam, sol.mu, eta, margins, layout, N)
        kkt_history.append(residual)
        parts_history.append({"outer": outer, "parts": parts,
                              "nlp_iters": sol.iterations,
                              "margins_max": float(np.max(margins.stage1) if margins.stage1.size else 0.0)})
        if residual <= config.kkt_tol:
            return _build_plan(form, layout, problem, config, s_t0, Sigma_t0,
                               sol, eta, gains, sigmas, margins, kkt_history,
                               parts_history, "solved",
                               time.perf_counter() - t_start, nlp_iters)

        # margin + correction update, then re-solve warm-started
        new_margins = _cap_margin_growth(margins_fresh, margins, config)
        sol_new = None
        for backtrack in range(6):
            nlp = _transcribe(problem, config, form, s_t0, new_margins, c_bar, N)
            cand = solve_nlp(nlp, sol.x, warm=sol, tol=inner_tol(residual),
                             max_iter=config.nlp_max_iters,
                             prox_init=config.prox_init)
            nlp_iters += cand.iterations
            if _usable(cand, config):
                sol_new = cand
                break
            if backtrack == 5:
                raise PlannerInfeasible(
                    f"nominal solve failed at outer iteration {outer} "
                    f"({cand.status}) after margin backtracking")
            # halve the margin update toward the last accepted margins
            new_margins = _blend_margins(new_margins, margins, config)
        margins = new_margins
        beta_bar = (margins.beta1, margins.beta2, margins.beta_tf)
        sol = sol_new

    raise PlannerMaxIterations(
        f"tailored solver did not reach kkt_tol={config.kkt_tol:.1e} within "
        f"{config.max_outer_iters} outer iterations "
        f"(last residual {kkt_history[-1]:.2e})",
        plan=None)


def _blend_margins(m_new: SafetyMarginSet, m_old: SafetyMarginSet,
                   config: SolverConfig) -> SafetyMarginSet:
    """Margin backtrack halfway (geometrically) toward the accepted margins."""
    def mid_beta(a, b):
        mid = np.sqrt(np.maximum(a, 1e-300) * np.maximum(b, 1e-300))
        return np.maximum((mid / config.sigma) ** 2 - config.eps, 0.0)

    return SafetyMarginSet.from_betas(
        mid_beta(m_new.stage1, m_old.stage1),
        mid_beta(m_new.stage2, m_old.stage2),
        mid_beta(m_new.terminal, m_old.terminal),
        config.sigma, config.eps)


def _cap_margin_growth(m_new: SafetyMarginSet, m_old: SafetyMarginSet,
                       config: SolverConfig, factor: float = 3.0) -> SafetyMarginSet:
    """Trust region on the margin update: at most `factor` growth per sweep.

    Inactive at the fixed point (margins stop growing there); it paces the
    early sweeps, where the margins inflate from the zero-uncertainty
    bootstrap toward their converged scale, so each warm-started nominal
    re-solve stays a small perturbation of the previous one.
    """
    def capped_beta(a, b):
        m = np.minimum(a, factor * b)
        return np.maximum((m / config.sigma) ** 2 - config.eps, 0.0)

    if all(np.all(np.asarray(a) <= factor * np.asarray(b)) for a, b in
           ((m_new.stage1, m_old.stage1), (m_new.stage2, m_old.stage2),
            (m_new.terminal, m_old.terminal))):
        return m_new
    return SafetyMarginSet.from_betas(
        capped_beta(m_new.stage1, m_old.stage1),
        capped_beta(m_new.stage2, m_old.stage2),
        capped_beta(m_new.terminal, m_old.terminal),
        config.sigma, config.eps)


def _usable(sol: NominalOCPSolution, config: SolverConfig) -> bool:
    """A stalled nominal solve still drives the alternation if its residual is
    small against the outer tolerance; the final certificate is the full
    coupled residual, so this only gates the margin-backtracking safeguard."""
    if sol.status == "solved":
        return True
    return sol.status == "max_iter" and \
        sol.kkt_residual <= max(50.0 * config.nlp_tol, 0.5 * config.kkt_tol)


def tailored_solve(problem: Problem, s_t0: Array, Sigma_t0: Array,
                   config: SolverConfig,
                   warm: Optional[RobustPlan] = None) -> RobustPlan:
    """Solve the robustified two-stage OCP by the alternating scheme."""
    return _alternate(problem, config, "two_stage", s_t0, Sigma_t0,
                      config.N1, warm)


def tailored_solve_endgame(problem: Problem, s_t0: Array, Sigma_t0: Array,
                           config: SolverConfig, N: int,
                           warm: Optional[RobustPlan] = None) -> RobustPlan:
    """Single-stage variant on a fixed grid with the exponential objective."""
    return _alternate(problem, config, "single_stage", s_t0, Sigma_t0, N, warm)


def kkt_residual(problem: Problem, config: SolverConfig, plan: RobustPlan) -> float:
    """Recompute the coupled KKT residual of a plan from scratch."""
    N = plan.u1.shape[0]
    if plan.form == "two_stage":
        layout = TwoStageLayout(config.N1, config.N2, problem.model.n_s,
                                problem.model.n_u, problem.cs.n_h,
                                problem.cs.n_h_tf)
    else:
        layout = SingleStageLayout(N, problem.model.n_s, problem.model.n_u,
                                   problem.cs.n_h, problem.cs.n_h_tf)
    eta = EtaSet(stage1=plan.duals.eta_stage1, stage2=plan.duals.eta_stage2,
                 terminal=plan.duals.eta_terminal)
    residual, _, _, _, _, _, _ = _full_kkt_residual(
        problem, config, plan.form, plan.s_t0, plan.Sigma_t0, plan.x_full,
        plan.lam_full, plan.duals.mu_full, eta, plan.margins, layout, N)
    return residual
