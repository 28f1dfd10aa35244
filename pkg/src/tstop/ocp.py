"""Transcription of the nominal frozen-margin OCPs into sparse NLPs.

Two problem shapes are supported:
  * the two-stage time-optimal OCP (fixed stage-1 grid, variable stage-2 grid
    whose total duration T2 is the objective), and
  * the exponentially weighted single-stage OCP used at endgame, whose L1
    tracking terms are reformulated exactly with nonnegative slack pairs.

Also home to the uncertainty gradient-correction coefficients that couple the
nominal subproblem to the frozen feedback gains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .constraints import ConstraintSet
from .gains import (EtaSet, NominalTrajectories, assemble_regularizers,
                    assemble_regularizers_single)
from .model import SystemModel, integrate_step, linearize_traj, step_dt_gradient
from .nlp import NLP
from .uncertainty import SafetyMarginSet
from .util import clip_psd_blocks, sym

Array = np.ndarray


@dataclass
class FrozenRobustification:
    """Margins held constant during a nominal solve, plus the linear correction."""

    margins: SafetyMarginSet
    c_bar: Optional[Array] = None


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------

class TwoStageLayout:
    """Index bookkeeping for x = [s1, u1, s2, u2, T2]."""

    def __init__(self, N1: int, N2: int, n_s: int, n_u: int, n_h: int, n_h_tf: int):
        self.N1, self.N2 = N1, N2
        self.n_s, self.n_u = n_s, n_u
        self.n_h, self.n_h_tf = n_h, n_h_tf
        self.off_s1 = 0
        self.off_u1 = (N1 + 1) * n_s
        self.off_s2 = self.off_u1 + N1 * n_u
        self.off_u2 = self.off_s2 + (N2 + 1) * n_s
        self.n_z = self.off_u2 + N2 * n_u
        self.idx_T2 = self.n_z
        self.n = self.n_z + 1
        # equality row offsets
        self.meq_init = 0
        self.meq_dyn1 = n_s
        self.meq_stitch = n_s + N1 * n_s
        self.meq_dyn2 = self.meq_stitch + n_s
        self.meq_term = self.meq_dyn2 + N2 * n_s
        self.m_eq = self.meq_term + n_s
        # inequality row offsets
        self.mi_stage1 = 0
        self.mi_stage2 = N1 * n_h
        self.mi_term = (N1 + N2) * n_h
        self.mi_t2 = self.mi_term + n_h_tf
        self.m_in = self.mi_t2 + 1
        # per-node coordinate indices: stage 1 (N1, n_s+n_u)
        d = n_s + n_u
        self.node1_idx = np.zeros((N1, d), dtype=int)
        for n in range(N1):
            self.node1_idx[n, :n_s] = self.off_s1 + n * n_s + np.arange(n_s)
            self.node1_idx[n, n_s:] = self.off_u1 + n * n_u + np.arange(n_u)
        self.node2_idx = np.zeros((N2, d), dtype=int)
        for n in range(N2):
            self.node2_idx[n, :n_s] = self.off_s2 + n * n_s + np.arange(n_s)
            self.node2_idx[n, n_s:] = self.off_u2 + n * n_u + np.arange(n_u)

    def s1_slice(self, n):
        return slice(self.off_s1 + n * self.n_s, self.off_s1 + (n + 1) * self.n_s)

    def unpack(self, x: Array):
        N1, N2, n_s, n_u = self.N1, self.N2, self.n_s, self.n_u
        S1 = x[self.off_s1:self.off_u1].reshape(N1 + 1, n_s)
        U1 = x[self.off_u1:self.off_s2].reshape(N1, n_u)
        S2 = x[self.off_s2:self.off_u2].reshape(N2 + 1, n_s)
        U2 = x[self.off_u2:self.n_z].reshape(N2, n_u)
        return S1, U1, S2, U2, float(x[self.idx_T2])

    def pack(self, S1, U1, S2, U2, T2) -> Array:
        return np.concatenate([np.ravel(S1), np.ravel(U1), np.ravel(S2),
                               np.ravel(U2), [T2]])

    def split_duals(self, mu: Array):
        """mu rows -> (stage1 (N1, n_h), stage2 (N2, n_h), terminal, rho)."""
        m1 = mu[self.mi_stage1:self.mi_stage2].reshape(self.N1, self.n_h)
        m2 = mu[self.mi_stage2:self.mi_term].reshape(self.N2, self.n_h)
        mt = mu[self.mi_term:self.mi_t2]
        return m1, m2, mt, float(mu[self.mi_t2])


class SingleStageLayout:
    """Index bookkeeping for x = [s, u, p, q] with L1 slack pairs p, q >= 0."""

    def __init__(self, N: int, n_s: int, n_u: int, n_h: int, n_h_tf: int):
        self.N = N
        self.n_s, self.n_u = n_s, n_u
        self.n_h, self.n_h_tf = n_h, n_h_tf
        self.off_s = 0
        self.off_u = (N + 1) * n_s
        self.n_z = self.off_u + N * n_u
        self.off_p = self.n_z
        self.off_q = self.off_p + N * n_s
        self.n = self.off_q + N * n_s
        # equality rows: init, dynamics, terminal, slack links
        self.meq_init = 0
        self.meq_dyn = n_s
        self.meq_term = n_s + N * n_s
        self.meq_slack = self.meq_term + n_s
        self.m_eq = self.meq_slack + N * n_s
        # inequality rows: stage, terminal, p >= 0, q >= 0
        self.mi_stage = 0
        self.mi_term = N * n_h
        self.mi_p = self.mi_term + n_h_tf
        self.mi_q = self.mi_p + N * n_s
        self.m_in = self.mi_q + N * n_s
        d = n_s + n_u
        self.node_idx = np.zeros((N, d), dtype=int)
        for n in range(N):
            self.node_idx[n, :n_s] = self.off_s + n * n_s + np.arange(n_s)
            self.node_idx[n, n_s:] = self.off_u + n * n_u + np.arange(n_u)

    def unpack(self, x: Array):
        N, n_s, n_u = self.N, self.n_s, self.n_u
        S = x[self.off_s:self.off_u].reshape(N + 1, n_s)
        U = x[self.off_u:self.n_z].reshape(N, n_u)
        P = x[self.off_p:self.off_q].reshape(N, n_s)
        Q = x[self.off_q:self.n].reshape(N, n_s)
        return S, U, P, Q

    def pack(self, S, U, P, Q) -> Array:
        return np.concatenate([np.ravel(S), np.ravel(U), np.ravel(P), np.ravel(Q)])

    def split_duals(self, mu: Array):
        ms = mu[self.mi_stage:self.mi_term].reshape(self.N, self.n_h)
        mt = mu[self.mi_term:self.mi_p]
        return ms, mt


# ---------------------------------------------------------------------------
# Two-stage transcription
# ---------------------------------------------------------------------------

def transcribe_two_stage(
    model: SystemModel,
    cs: ConstraintSet,
    frozen: FrozenRobustification,
    s_t0: Array,
    s_tf: Array,
    N1: int,
    N2: int,
    hessian_fd_step: float = 1e-5,
) -> NLP:
    """Sparse NLP for the frozen-margin two-stage time-optimal problem.

    Objective T2 + c_bar' z. Equalities: initial state, stage-1 dynamics on the
    fixed grid, stitching, stage-2 dynamics with step T2/N2, terminal state.
    Inequalities: margins-shifted stage constraints at every control node of
    both stages, terminal constraints, and -T2 <= 0.
    """
    n_s, n_u, n_h, n_h_tf = model.n_s, model.n_u, cs.n_h, cs.n_h_tf
    lay = TwoStageLayout(N1, N2, n_s, n_u, n_h, n_h_tf)
    m = frozen.margins
    if m.stage1.shape != (N1, n_h) or m.stage2.shape != (N2, n_h) \
            or m.terminal.shape != (n_h_tf,):
        raise ValueError("margin arrays do not match the transcription dimensions")
    s_t0 = np.asarray(s_t0, dtype=float)
    s_tf = np.asarray(s_tf, dtype=float)
    if s_t0.shape != (n_s,) or s_tf.shape != (n_s,):
        raise ValueError("boundary states do not match the state dimension")
    t_s = model.t_s

    c = np.zeros(lay.n)
    c[lay.idx_T2] = 1.0
    if frozen.c_bar is not None:
        if frozen.c_bar.shape != (lay.n_z,):
            raise ValueError("c_bar length must equal n_z")
        c[:lay.n_z] += frozen.c_bar

    def eq_values(x: Array) -> Array:
        S1, U1, S2, U2, T2 = lay.unpack(x)
        g = np.zeros(lay.m_eq)
        g[lay.meq_init:lay.meq_init + n_s] = S1[0] - s_t0
        if N1:
            F1 = integrate_step(model, S1[:-1], U1, t_s)
            g[lay.meq_dyn1:lay.meq_stitch] = (S1[1:] - F1).ravel()
        g[lay.meq_stitch:lay.meq_dyn2] = S2[0] - S1[N1]
        dt2 = max(T2, 1e-12) / N2
        F2 = integrate_step(model, S2[:-1], U2, dt2)
        g[lay.meq_dyn2:lay.meq_term] = (S2[1:] - F2).ravel()
        g[lay.meq_term:] = S2[N2] - s_tf
        return g

    def eval_eq(x: Array):
        S1, U1, S2, U2, T2 = lay.unpack(x)
        dt2 = max(T2, 1e-12) / N2
        g = eq_values(x)
        rows, cols, vals = [], [], []
        # initial state rows: I on s1[0]
        rows.append(np.arange(n_s))
        cols.append(np.arange(n_s) + lay.off_s1)
        vals.append(np.ones(n_s))
        if N1:
            A1, B1 = linearize_traj(model, S1[:-1], U1, t_s)
            r = lay.meq_dyn1 + np.arange(N1 * n_s).reshape(N1, n_s)
            # identity on s1[n+1]
            rows.append(r.ravel())
            cols.append((lay.off_s1 + (np.arange(1, N1 + 1)[:, None] * n_s)
                         + np.arange(n_s)[None, :]).ravel())
            vals.append(np.ones(N1 * n_s))
            # -A on s1[n]
            rows.append(np.repeat(r, n_s, axis=1).ravel())
            cols.append(np.tile(lay.off_s1 + np.arange(N1)[:, None, None] * n_s
                                + np.arange(n_s)[None, None, :], (1, n_s, 1)).ravel())
            vals.append((-A1).ravel())
            # -B on u1[n]
            rows.append(np.repeat(r, n_u, axis=1).ravel())
            cols.append(np.tile(lay.off_u1 + np.arange(N1)[:, None, None] * n_u
                                + np.arange(n_u)[None, None, :], (1, n_s, 1)).ravel())
            vals.append((-B1).ravel())
        # stitch rows
        r = lay.meq_stitch + np.arange(n_s)
        rows.extend([r, r])
        cols.extend([lay.off_s2 + np.arange(n_s), lay.off_s1 + N1 * n_s + np.arange(n_s)])
        vals.extend([np.ones(n_s), -np.ones(n_s)])
        # stage-2 dynamics
        A2, B2 = linearize_traj(model, S2[:-1], U2, dt2)
        Fdt = step_dt_gradient(model, S2[:-1], U2, dt2)
        r = lay.meq_dyn2 + np.arange(N2 * n_s).reshape(N2, n_s)
        rows.append(r.ravel())
        cols.append((lay.off_s2 + (np.arange(1, N2 + 1)[:, None] * n_s)
                     + np.arange(n_s)[None, :]).ravel())
        vals.append(np.ones(N2 * n_s))
        rows.append(np.repeat(r, n_s, axis=1).ravel())
        cols.append(np.tile(lay.off_s2 + np.arange(N2)[:, None, None] * n_s
                            + np.arange(n_s)[None, None, :], (1, n_s, 1)).ravel())
        vals.append((-A2).ravel())
        rows.append(np.repeat(r, n_u, axis=1).ravel())
        cols.append(np.tile(lay.off_u2 + np.arange(N2)[:, None, None] * n_u
                            + np.arange(n_u)[None, None, :], (1, n_s, 1)).ravel())
        vals.append((-B2).ravel())
        rows.append(r.ravel())
        cols.append(np.full(N2 * n_s, lay.idx_T2))
        vals.append((-Fdt / N2).ravel())
        # terminal equality
        r = lay.meq_term + np.arange(n_s)
        rows.append(r)
        cols.append(lay.off_s2 + N2 * n_s + np.arange(n_s))
        vals.append(np.ones(n_s))

        J = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(lay.m_eq, lay.n))
        return g, J

    def ineq_values(x: Array) -> Array:
        S1, U1, S2, U2, T2 = lay.unpack(x)
        h = np.zeros(lay.m_in)
        if N1:
            v1, _ = cs.eval_stage(S1[:-1], U1)
            h[lay.mi_stage1:lay.mi_stage2] = (v1 + m.stage1).ravel()
        v2, _ = cs.eval_stage(S2[:-1], U2)
        h[lay.mi_stage2:lay.mi_term] = (v2 + m.stage2).ravel()
        if n_h_tf:
            vt, _ = cs.eval_terminal(S2[N2])
            h[lay.mi_term:lay.mi_t2] = vt + m.terminal
        h[lay.mi_t2] = -T2
        return h

    def eval_ineq(x: Array):
        S1, U1, S2, U2, T2 = lay.unpack(x)
        h = ineq_values(x)
        rows, cols, vals = [], [], []
        if N1:
            _, jac1 = cs.eval_stage(S1[:-1], U1)
            r = lay.mi_stage1 + np.arange(N1 * n_h).reshape(N1, n_h)
            rows.append(np.repeat(r[:, :, None], n_s + n_u, axis=2).ravel())
            cols.append(np.tile(lay.node1_idx[:, None, :], (1, n_h, 1)).ravel())
            vals.append(jac1.ravel())
        _, jac2 = cs.eval_stage(S2[:-1], U2)
        r = lay.mi_stage2 + np.arange(N2 * n_h).reshape(N2, n_h)
        rows.append(np.repeat(r[:, :, None], n_s + n_u, axis=2).ravel())
        cols.append(np.tile(lay.node2_idx[:, None, :], (1, n_h, 1)).ravel())
        vals.append(jac2.ravel())
        if n_h_tf:
            _, jt = cs.eval_terminal(S2[N2])
            r = lay.mi_term + np.arange(n_h_tf)
            rows.append(np.repeat(r, n_s))
            cols.append(np.tile(lay.off_s2 + N2 * n_s + np.arange(n_s), n_h_tf))
            vals.append(jt.ravel())
        rows.append(np.array([lay.mi_t2]))
        cols.append(np.array([lay.idx_T2]))
        vals.append(np.array([-1.0]))
        J = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(lay.m_in, lay.n))
        return h, J

    def lag_hess(x: Array, lam: Array, mu: Array):
        S1, U1, S2, U2, T2 = lay.unpack(x)
        dt2 = max(T2, 1e-12) / N2
        rows, cols, vals = [], [], []
        d = n_s + n_u
        if N1:
            lam1 = lam[lay.meq_dyn1:lay.meq_stitch].reshape(N1, n_s)
            H1 = -_dyn_hessian_blocks(model, S1[:-1], U1, t_s, lam1, hessian_fd_step)
            mu1 = mu[lay.mi_stage1:lay.mi_stage2].reshape(N1, n_h)
            if n_h:
                Ht = cs.stage_hessians(S1[:-1], U1)
                H1 += np.einsum("ni,nide->nde", mu1, Ht)
            H1 = clip_psd_blocks(H1)
            rows.append(np.repeat(lay.node1_idx[:, :, None], d, axis=2).ravel())
            cols.append(np.repeat(lay.node1_idx[:, None, :], d, axis=1).ravel())
            vals.append(H1.ravel())
        lam2 = lam[lay.meq_dyn2:lay.meq_term].reshape(N2, n_s)
        H2 = -_dyn_hessian_blocks_dt(model, S2[:-1], U2, dt2, lam2, hessian_fd_step)
        # chain dt = T2 / N2 into the extended (s, u, T2) block
        H2[:, -1, :] /= N2
        H2[:, :, -1] /= N2
        mu2 = mu[lay.mi_stage2:lay.mi_term].reshape(N2, n_h)
        if n_h:
            Ht = cs.stage_hessians(S2[:-1], U2)
            H2[:, :d, :d] += np.einsum("ni,nide->nde", mu2, Ht)
        H2 = clip_psd_blocks(H2)
        idx2 = np.concatenate([lay.node2_idx, np.full((N2, 1), lay.idx_T2)], axis=1)
        rows.append(np.repeat(idx2[:, :, None], d + 1, axis=2).ravel())
        cols.append(np.repeat(idx2[:, None, :], d + 1, axis=1).ravel())
        vals.append(H2.ravel())
        if n_h_tf:
            mut = mu[lay.mi_term:lay.mi_t2]
            Htf = np.einsum("i,ide->de", mut, cs.terminal_hessians(S2[N2]))
            Htf = clip_psd_blocks(Htf)
            tidx = lay.off_s2 + N2 * n_s + np.arange(n_s)
            rows.append(np.repeat(tidx, n_s))
            cols.append(np.tile(tidx, n_s))
            vals.append(Htf.ravel())
        H = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(lay.n, lay.n))
        return H

    return NLP(n=lay.n, c=c, eval_eq=eval_eq, eval_ineq=eval_ineq,
               lag_hess=lag_hess, eq_values=eq_values, ineq_values=ineq_values,
               meta={"layout": lay, "form": "two_stage"})


# ---------------------------------------------------------------------------
# Exponentially weighted single-stage transcription
# ---------------------------------------------------------------------------

def transcribe_exp_weighted(
    model: SystemModel,
    cs: ConstraintSet,
    frozen: FrozenRobustification,
    s_t0: Array,
    s_tf: Array,
    N: int,
    gamma: float,
    hessian_fd_step: float = 1e-5,
) -> NLP:
    """Sparse NLP for the endgame OCP on the fixed grid.

    The objective sum_n gamma^n ||s_n - s_tf||_1 is reformulated exactly with
    slack pairs p, q >= 0 and equality links s_n - s_tf = p_n - q_n.
    """
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    n_s, n_u, n_h, n_h_tf = model.n_s, model.n_u, cs.n_h, cs.n_h_tf
    lay = SingleStageLayout(N, n_s, n_u, n_h, n_h_tf)
    m = frozen.margins
    if m.stage1.shape != (N, n_h) or m.terminal.shape != (n_h_tf,):
        raise ValueError("margin arrays do not match the transcription dimensions")
    s_t0 = np.asarray(s_t0, dtype=float)
    s_tf = np.asarray(s_tf, dtype=float)
    t_s = model.t_s

    weights = gamma ** np.arange(N)
    c = np.zeros(lay.n)
    c[lay.off_p:lay.off_q] = np.repeat(weights, n_s)
    c[lay.off_q:lay.n] = np.repeat(weights, n_s)
    if frozen.c_bar is not None:
        if frozen.c_bar.shape != (lay.n_z,):
            raise ValueError("c_bar length must equal n_z")
        c[:lay.n_z] += frozen.c_bar

    def eq_values(x: Array) -> Array:
        S, U, P, Q = lay.unpack(x)
        g = np.zeros(lay.m_eq)
        g[lay.meq_init:lay.meq_dyn] = S[0] - s_t0
        F = integrate_step(model, S[:-1], U, t_s)
        g[lay.meq_dyn:lay.meq_term] = (S[1:] - F).ravel()
        g[lay.meq_term:lay.meq_slack] = S[N] - s_tf
        g[lay.meq_slack:] = (S[:-1] - s_tf - P + Q).ravel()
        return g

    def eval_eq(x: Array):
        S, U, P, Q = lay.unpack(x)
        g = eq_values(x)
        rows, cols, vals = [], [], []
        rows.append(np.arange(n_s))
        cols.append(lay.off_s + np.arange(n_s))
        vals.append(np.ones(n_s))
        A, B = linearize_traj(model, S[:-1], U, t_s)
        r = lay.meq_dyn + np.arange(N * n_s).reshape(N, n_s)
        rows.append(r.ravel())
        cols.append((lay.off_s + np.arange(1, N + 1)[:, None] * n_s
                     + np.arange(n_s)[None, :]).ravel())
        vals.append(np.ones(N * n_s))
        rows.append(np.repeat(r, n_s, axis=1).ravel())
        cols.append(np.tile(lay.off_s + np.arange(N)[:, None, None] * n_s
                            + np.arange(n_s)[None, None, :], (1, n_s, 1)).ravel())
        vals.append((-A).ravel())
        rows.append(np.repeat(r, n_u, axis=1).ravel())
        cols.append(np.tile(lay.off_u + np.arange(N)[:, None, None] * n_u
                            + np.arange(n_u)[None, None, :], (1, n_s, 1)).ravel())
        vals.append((-B).ravel())
        r = lay.meq_term + np.arange(n_s)
        rows.append(r)
        cols.append(lay.off_s + N * n_s + np.arange(n_s))
        vals.append(np.ones(n_s))
        # slack links: s_n - p_n + q_n = s_tf
        r = lay.meq_slack + np.arange(N * n_s)
        si = (lay.off_s + np.arange(N)[:, None] * n_s + np.arange(n_s)[None, :]).ravel()
        pi = lay.off_p + np.arange(N * n_s)
        qi = lay.off_q + np.arange(N * n_s)
        rows.extend([r, r, r])
        cols.extend([si, pi, qi])
        vals.extend([np.ones(N * n_s), -np.ones(N * n_s), np.ones(N * n_s)])
        J = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(lay.m_eq, lay.n))
        return g, J

    def ineq_values(x: Array) -> Array:
        S, U, P, Q = lay.unpack(x)
        h = np.zeros(lay.m_in)
        if n_h:
            v, _ = cs.eval_stage(S[:-1], U)
            h[lay.mi_stage:lay.mi_term] = (v + m.stage1).ravel()
        if n_h_tf:
            vt, _ = cs.eval_terminal(S[N])
            h[lay.mi_term:lay.mi_p] = vt + m.terminal
        h[lay.mi_p:lay.mi_q] = -P.ravel()
        h[lay.mi_q:] = -Q.ravel()
        return h

    def eval_ineq(x: Array):
        S, U, P, Q = lay.unpack(x)
        h = ineq_values(x)
        rows, cols, vals = [], [], []
        if n_h:
            _, jac = cs.eval_stage(S[:-1], U)
            r = lay.mi_stage + np.arange(N * n_h).reshape(N, n_h)
            rows.append(np.repeat(r[:, :, None], n_s + n_u, axis=2).ravel())
            cols.append(np.tile(lay.node_idx[:, None, :], (1, n_h, 1)).ravel())
            vals.append(jac.ravel())
        if n_h_tf:
            _, jt = cs.eval_terminal(S[N])
            r = lay.mi_term + np.arange(n_h_tf)
            rows.append(np.repeat(r, n_s))
            cols.append(np.tile(lay.off_s + N * n_s + np.arange(n_s), n_h_tf))
            vals.append(jt.ravel())
        r = lay.mi_p + np.arange(N * n_s)
        rows.append(r)
        cols.append(lay.off_p + np.arange(N * n_s))
        vals.append(-np.ones(N * n_s))
        r = lay.mi_q + np.arange(N * n_s)
        rows.append(r)
        cols.append(lay.off_q + np.arange(N * n_s))
        vals.append(-np.ones(N * n_s))
        J = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(lay.m_in, lay.n))
        return h, J

    def lag_hess(x: Array, lam: Array, mu: Array):
        S, U, P, Q = lay.unpack(x)
        d = n_s + n_u
        lam_dyn = lam[lay.meq_dyn:lay.meq_term].reshape(N, n_s)
        Hn = -_dyn_hessian_blocks(model, S[:-1], U, t_s, lam_dyn, hessian_fd_step)
        if n_h:
            mu_s = mu[lay.mi_stage:lay.mi_term].reshape(N, n_h)
            Ht = cs.stage_hessians(S[:-1], U)
            Hn += np.einsum("ni,nide->nde", mu_s, Ht)
        Hn = clip_psd_blocks(Hn)
        rows = [np.repeat(lay.node_idx[:, :, None], d, axis=2).ravel()]
        cols = [np.repeat(lay.node_idx[:, None, :], d, axis=1).ravel()]
        vals = [Hn.ravel()]
        if n_h_tf:
            mut = mu[lay.mi_term:lay.mi_p]
            Htf = clip_psd_blocks(np.einsum("i,ide->de", mut, cs.terminal_hessians(S[N])))
            tidx = lay.off_s + N * n_s + np.arange(n_s)
            rows.append(np.repeat(tidx, n_s))
            cols.append(np.tile(tidx, n_s))
            vals.append(Htf.ravel())
        H = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(lay.n, lay.n))
        return H

    return NLP(n=lay.n, c=c, eval_eq=eval_eq, eval_ineq=eval_ineq,
               lag_hess=lag_hess, eq_values=eq_values, ineq_values=ineq_values,
               meta={"layout": lay, "form": "single_stage", "gamma": gamma})


# ---------------------------------------------------------------------------
# Exact Lagrangian curvature of the dynamics rows (finite differences of the
# analytic step Jacobians, batched over nodes)
# ---------------------------------------------------------------------------

def _dyn_grad(model, S, U, dt, Lam):
    A, B = linearize_traj(model, S, U, dt)
    gs = np.einsum("nij,ni->nj", A, Lam)
    gu = np.einsum("nij,ni->nj", B, Lam)
    return np.concatenate([gs, gu], axis=1)


def _dyn_hessian_blocks(model, S, U, dt, Lam, step):
    """Node blocks of d^2(lam'F)/d(s,u)^2: (N, n_s+n_u, n_s+n_u)."""
    n_s, n_u = model.n_s, model.n_u
    N = S.shape[0]
    d = n_s + n_u
    H = np.zeros((N, d, d))
    for j in range(d):
        if j < n_s:
            hh = step * (1.0 + np.abs(S[:, j]))
            Sp, Sm = S.copy(), S.copy()
            Sp[:, j] += hh
            Sm[:, j] -= hh
            gp = _dyn_grad(model, Sp, U, dt, Lam)
            gm = _dyn_grad(model, Sm, U, dt, Lam)
        else:
            hh = step * (1.0 + np.abs(U[:, j - n_s]))
            Up, Um = U.copy(), U.copy()
            Up[:, j - n_s] += hh
            Um[:, j - n_s] -= hh
            gp = _dyn_grad(model, S, Up, dt, Lam)
            gm = _dyn_grad(model, S, Um, dt, Lam)
        H[:, :, j] = (gp - gm) / (2.0 * hh[:, None])
    return sym(H)


def _dyn_grad_dt(model, S, U, dt, Lam):
    g = _dyn_grad(model, S, U, dt, Lam)
    gdt = np.einsum("ni,ni->n", step_dt_gradient(model, S, U, dt), Lam)
    return np.concatenate([g, gdt[:, None]], axis=1)


def _dyn_hessian_blocks_dt(model, S, U, dt, Lam, step):
    """Node blocks of d^2(lam'F)/d(s,u,dt)^2: (N, n_s+n_u+1, ...)."""
    n_s, n_u = model.n_s, model.n_u
    N = S.shape[0]
    d = n_s + n_u + 1
    H = np.zeros((N, d, d))
    for j in range(d):
        if j < n_s:
            hh = step * (1.0 + np.abs(S[:, j]))
            Sp, Sm = S.copy(), S.copy()
            Sp[:, j] += hh
            Sm[:, j] -= hh
            gp = _dyn_grad_dt(model, Sp, U, dt, Lam)
            gm = _dyn_grad_dt(model, Sm, U, dt, Lam)
            H[:, :, j] = (gp - gm) / (2.0 * hh[:, None])
        elif j < n_s + n_u:
            hh = step * (1.0 + np.abs(U[:, j - n_s]))
            Up, Um = U.copy(), U.copy()
            Up[:, j - n_s] += hh
            Um[:, j - n_s] -= hh
            gp = _dyn_grad_dt(model, S, Up, dt, Lam)
            gm = _dyn_grad_dt(model, S, Um, dt, Lam)
            H[:, :, j] = (gp - gm) / (2.0 * hh[:, None])
        else:
            hh = step * (1.0 + abs(dt))
            gp = _dyn_grad_dt(model, S, U, dt + hh, Lam)
            gm = _dyn_grad_dt(model, S, U, dt - hh, Lam)
            H[:, :, j] = (gp - gm) / (2.0 * hh)
    return sym(H)


# ---------------------------------------------------------------------------
# Initial guesses
# ---------------------------------------------------------------------------

def _segment_detour(a: Array, b: Array, obstacles, clearance: float):
    """Waypoint pushing the worst obstacle crossing of segment a-b outward."""
    ts = np.linspace(0.0, 1.0, 64)
    seg = a[None, :] + ts[:, None] * (b - a)[None, :]
    worst, hit, t_hit = 0.0, None, 0.0
    for obs in obstacles:
        p = seg - np.array([obs.x, obs.y])
        vals = 1.0 - np.einsum("ni,ij,nj->n", p, obs.shape_matrix(), p)
        i = int(np.argmax(vals))
        if vals[i] > worst:
            worst, hit, t_hit = float(vals[i]), obs, float(ts[i])
    if hit is None or worst <= 0.0:
        return None
    center = np.array([hit.x, hit.y])
    direction = a + t_hit * (b - a) - center
    if np.linalg.norm(direction) < 1e-9:
        chord = b - a
        direction = np.array([-chord[1], chord[0]])
    Om = hit.shape_matrix()
    scale = clearance / np.sqrt(direction @ Om @ direction)
    return center + scale * direction


def route_waypoints(p0: Array, pf: Array, obstacles, clearance: float = 1.25,
                    passes: int = 3) -> Array:
    """Polyline from p0 to pf detouring around intersected ellipses."""
    pts = [np.asarray(p0, dtype=float), np.asarray(pf, dtype=float)]
    for _ in range(passes):
        out = [pts[0]]
        changed = False
        for a, b in zip(pts[:-1], pts[1:]):
            w = _segment_detour(a, b, obstacles, clearance)
            if w is not None:
                out.append(w)
                changed = True
            out.append(b)
        pts = out
        if not changed:
            break
    return np.vstack(pts)


def _interp_nodes(s_t0: Array, s_tf: Array, count: int, n_s: int,
                  heading_index: Optional[int], obstacles=()) -> tuple[Array, float]:
    """Interpolate nodes along an obstacle-avoiding polyline.

    Planar models get path-aligned interior headings: a zero-velocity,
    zero-heading-error seed linearizes to an uncontrollable lateral direction.
    """
    frac = np.linspace(0.0, 1.0, count)
    if n_s <= 1 or heading_index is None:
        nodes = s_t0[None, :] + frac[:, None] * (s_tf - s_t0)[None, :]
        dist = abs(s_tf[0] - s_t0[0]) if n_s == 1 else float(
            np.linalg.norm((s_tf - s_t0)[:2]))
        return nodes, dist

    poly = route_waypoints(s_t0[:2], s_tf[:2], obstacles) if len(obstacles) \
        else np.vstack([s_t0[:2], s_tf[:2]])
    seg = np.diff(poly, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    dist = float(seg_len.sum())
    nodes = s_t0[None, :] + frac[:, None] * (s_tf - s_t0)[None, :]
    if dist > 0:
        arc = np.concatenate([[0.0], np.cumsum(seg_len)])
        svals = frac * dist
        nodes[:, 0] = np.interp(svals, arc, poly[:, 0])
        nodes[:, 1] = np.interp(svals, arc, poly[:, 1])
        # heading follows the local segment direction
        seg_idx = np.clip(np.searchsorted(arc, svals, side="right") - 1,
                          0, len(seg_len) - 1)
        bearings = np.arctan2(seg[:, 1], seg[:, 0])
        nodes[1:-1, heading_index] = bearings[seg_idx[1:-1]]
    return nodes, dist


def initial_guess_two_stage(lay: TwoStageLayout, s_t0: Array, s_tf: Array,
                            v_max: float, heading_index: Optional[int] = None,
                            obstacles=()) -> Array:
    """Routed node interpolation with T2 = 1.2 dist / v_max."""
    s_t0 = np.asarray(s_t0, dtype=float)
    s_tf = np.asarray(s_tf, dtype=float)
    nodes, dist = _interp_nodes(s_t0, s_tf, lay.N1 + lay.N2 + 1, lay.n_s,
                                heading_index, obstacles)
    T2 = max(1.2 * dist / v_max, 1e-2)
    S1 = nodes[:lay.N1 + 1]
    S2 = nodes[lay.N1:]
    U1 = np.zeros((lay.N1, lay.n_u))
    U2 = np.zeros((lay.N2, lay.n_u))
    if heading_index is not None:
        # nonzero forward speed keeps the dynamics linearization controllable
        U1[:, 0] = 0.5 * v_max
        U2[:, 0] = 0.5 * v_max
    return lay.pack(S1, U1, S2, U2, T2)


def initial_guess_exp(lay: SingleStageLayout, s_t0: Array, s_tf: Array,
                      v_max: Optional[float] = None,
                      heading_index: Optional[int] = None,
                      obstacles=()) -> Array:
    s_t0 = np.asarray(s_t0, dtype=float)
    s_tf = np.asarray(s_tf, dtype=float)
    nodes, dist = _interp_nodes(s_t0, s_tf, lay.N + 1, lay.n_s, heading_index,
                                obstacles)
    U = np.zeros((lay.N, lay.n_u))
    if heading_index is not None and v_max is not None:
        U[:, 0] = 0.5 * v_max
    diff = nodes[:-1] - s_tf
    P = np.maximum(diff, 0.0) + 1e-6
    Q = np.maximum(-diff, 0.0) + 1e-6
    return lay.pack(nodes, U, P, Q)


# ---------------------------------------------------------------------------
# Uncertainty gradient corrections
# ---------------------------------------------------------------------------

def _regs_and_chain(model, cs, traj, K, sigmas, eta, R_regu, R_regu_tf):
    if traj.two_stage:
        regs = assemble_regularizers(traj, eta, R_regu, R_regu_tf, cs)
    else:
        regs = assemble_regularizers_single(traj, eta, R_regu, R_regu_tf, cs)
    A, B = linearize_traj(model, traj.s1[:-1], traj.u1, model.t_s)
    C = A + B @ K
    return regs, A, B, C


def _dAB_tensors(model, S, U, dt, step=1e-5):
    """Central-difference derivatives of (A, B) w.r.t. each node coordinate."""
    n_s, n_u = model.n_s, model.n_u
    N = S.shape[0]
    d = n_s + n_u
    dA = np.zeros((N, d, n_s, n_s))
    dB = np.zeros((N, d, n_s, n_u))
    for j in range(d):
        if j < n_s:
            hh = step * (1.0 + np.abs(S[:, j]))
            Sp, Sm = S.copy(), S.copy()
            Sp[:, j] += hh
            Sm[:, j] -= hh
            Ap, Bp = linearize_traj(model, Sp, U, dt)
            Am, Bm = linearize_traj(model, Sm, U, dt)
        else:
            hh = step * (1.0 + np.abs(U[:, j - n_s]))
            Up, Um = U.copy(), U.copy()
            Up[:, j - n_s] += hh
            Um[:, j - n_s] -= hh
            Ap, Bp = linearize_traj(model, S, Up, dt)
            Am, Bm = linearize_traj(model, S, Um, dt)
        dA[:, j] = (Ap - Am) / (2.0 * hh[:, None, None])
        dB[:, j] = (Bp - Bm) / (2.0 * hh[:, None, None])
    return dA, dB


def _joint_covs(K: Array, sigmas: Array) -> Array:
    """[I; K_n] Sigma_n [I; K_n]^T per node: the covariance of vec(s, u)."""
    N, n_u, n_s = K.shape
    IK = np.concatenate([np.broadcast_to(np.eye(n_s), (N, n_s, n_s)), K], axis=1)
    return np.einsum("nds,nst,net->nde", IK, sigmas[:N], IK)


def _stage_weight_blocks(regs, K: Array) -> Array:
    """W_n = [I; K_n]^T R_n [I; K_n] for each node."""
    N, n_u, n_s = K.shape
    IK = np.concatenate([np.broadcast_to(np.eye(n_s), (N, n_s, n_s)), K], axis=1)
    return np.einsum("nds,nde,net->nst", IK, regs.R, IK)


def uncertainty_objective(
    model: SystemModel,
    cs: ConstraintSet,
    traj: NominalTrajectories,
    K: Array,
    Sigma_t0: Array,
    eta: EtaSet,
    R_regu: Array,
    R_regu_tf: Array,
) -> float:
    """L(z, M) + eta' H(z, M) with gains fixed and covariances induced by z.

    This is the scalar whose z-gradient the correction coefficients equal;
    kept explicit so finite differences can validate gradient_correction.
    """
    if traj.two_stage:
        regs = assemble_regularizers(traj, eta, R_regu, R_regu_tf, cs)
    else:
        regs = assemble_regularizers_single(traj, eta, R_regu, R_regu_tf, cs)
    A, B = linearize_traj(model, traj.s1[:-1], traj.u1, model.t_s)
    N1 = traj.u1.shape[0]
    n_s = model.n_s
    sig = np.zeros((N1 + 1, n_s, n_s))
    sig[0] = sym(np.asarray(Sigma_t0, dtype=float))
    C = A + B @ K
    for n in range(N1):
        sig[n + 1] = sym(C[n] @ sig[n] @ C[n].T + model.Sigma_w)
    W = _stage_weight_blocks(regs, K)
    val = float(np.einsum("nst,nts->", W, sig[:-1]))
    val += float(np.trace(regs.R_tf @ sig[N1]))
    return val


def gradient_correction(
    model: SystemModel,
    cs: ConstraintSet,
    traj: NominalTrajectories,
    K: Array,
    sigmas: Array,
    eta: EtaSet,
    R_regu: Array,
    R_regu_tf: Array,
) -> Array:
    """Correction coefficients: the z-gradient of L + eta'H at frozen gains.

    Covariances are treated as the function of z induced by the closed-loop
    recursion with the step Jacobians re-linearized at z (accumulated in
    reverse along the recursion); the eta-weighted variance terms contribute
    both through the covariance path and through the constraint gradients.
    """
    n_s, n_u = model.n_s, model.n_u
    N1 = traj.u1.shape[0]
    regs, A, B, C = _regs_and_chain(model, cs, traj, K, sigmas, eta, R_regu, R_regu_tf)
    W = _stage_weight_blocks(regs, K)

    # backward adjoint S_n = W_n + C_n^T S_{n+1} C_n
    S_adj = np.zeros((N1 + 1, n_s, n_s))
    S_adj[N1] = regs.R_tf
    for n in range(N1 - 1, -1, -1):
        S_adj[n] = sym(W[n] + C[n].T @ S_adj[n + 1] @ C[n])

    # path terms: dPsi/dx_{n,j} = 2 <S_{n+1} C_n Sigma_n, dC_n/dx_j>
    dA, dB = _dAB_tensors(model, traj.s1[:-1], traj.u1, model.t_s)
    dC = dA + np.einsum("njab,nbc->njac", dB, K)
    M = 2.0 * np.einsum("nab,nbc,ncd->nad", S_adj[1:], C, sigmas[:-1])
    grad_nodes = np.einsum("nab,njab->nj", M, dC)

    # direct terms: d(eta_i g'Pg)/dx = 2 eta_i Hess_i (P g_i)
    if cs.n_h and eta.stage1.size:
        _, jac1 = cs.eval_stage(traj.s1[:-1], traj.u1)
        hess1 = cs.stage_hessians(traj.s1[:-1], traj.u1)
        P = _joint_covs(K, sigmas)
        Pg = np.einsum("nde,nie->nid", P, jac1)
        grad_nodes += 2.0 * np.einsum("ni,nide,nie->nd", eta.stage1, hess1, Pg)

    if traj.two_stage:
        lay = TwoStageLayout(N1, traj.u2.shape[0], n_s, n_u, cs.n_h, cs.n_h_tf)
        c_bar = np.zeros(lay.n_z)
        np.add.at(c_bar, lay.node1_idx.ravel(), grad_nodes.ravel())
        if cs.n_h and eta.stage2.size:
            _, jac2 = cs.eval_stage(traj.s2[:-1], traj.u2)
            hess2 = cs.stage_hessians(traj.s2[:-1], traj.u2)
            Pf = _joint_covs(K[N1 - 1:N1], sigmas[N1 - 1:N1])[0]
            Pg2 = np.einsum("de,mie->mid", Pf, jac2)
            g2 = 2.0 * np.einsum("mi,mide,mie->md", eta.stage2, hess2, Pg2)
            np.add.at(c_bar, lay.node2_idx.ravel(), g2.ravel())
        term_idx = lay.off_s2 + lay.N2 * n_s + np.arange(n_s)
    else:
        lay = SingleStageLayout(N1, n_s, n_u, cs.n_h, cs.n_h_tf)
        c_bar = np.zeros(lay.n_z)
        np.add.at(c_bar, lay.node_idx.ravel(), grad_nodes.ravel())
        term_idx = lay.off_s + lay.N * n_s + np.arange(n_s)

    if cs.n_h_tf and eta.terminal.size:
        s_term = traj.terminal_state
        _, jt = cs.eval_terminal(s_term)
        ht = cs.terminal_hessians(s_term)
        Sg = np.einsum("de,ie->id", sigmas[N1], jt)
        gt = 2.0 * np.einsum("i,ide,ie->d", eta.terminal, ht, Sg)
        np.add.at(c_bar, term_idx, gt)
    return c_bar


def gradient_correction_forward(
    model: SystemModel,
    cs: ConstraintSet,
    traj: NominalTrajectories,
    K: Array,
    sigmas: Array,
    eta: EtaSet,
    R_regu: Array,
    R_regu_tf: Array,
) -> Array:
    """Forward-accumulation evaluation of the same gradient (test oracle).

    Propagates each node coordinate's covariance sensitivity forward through
    the recursion; O(N^2) but independent of the adjoint path.
    """
    n_s, n_u = model.n_s, model.n_u
    d = n_s + n_u
    N1 = traj.u1.shape[0]
    regs, A, B, C = _regs_and_chain(model, cs, traj, K, sigmas, eta, R_regu, R_regu_tf)
    W = _stage_weight_blocks(regs, K)
    dA, dB = _dAB_tensors(model, traj.s1[:-1], traj.u1, model.t_s)
    dC = dA + np.einsum("njab,nbc->njac", dB, K)

    grad_nodes = np.zeros((N1, d))
    for k in range(N1):
        for j in range(d):
            E = dC[k, j]
            D = E @ sigmas[k] @ C[k].T + C[k] @ sigmas[k] @ E.T
            acc = 0.0
            for n in range(k + 1, N1 + 1):
                if n < N1:
                    acc += float(np.sum(W[n] * D.T))
                else:
                    acc += float(np.trace(regs.R_tf @ D))
                if n < N1:
                    D = C[n] @ D @ C[n].T
            grad_nodes[k, j] = acc

    if cs.n_h and eta.stage1.size:
        _, jac1 = cs.eval_stage(traj.s1[:-1], traj.u1)
        hess1 = cs.stage_hessians(traj.s1[:-1], traj.u1)
        P = _joint_covs(K, sigmas)
        Pg = np.einsum("nde,nie->nid", P, jac1)
        grad_nodes += 2.0 * np.einsum("ni,nide,nie->nd", eta.stage1, hess1, Pg)

    if traj.two_stage:
        lay = TwoStageLayout(N1, traj.u2.shape[0], n_s, n_u, cs.n_h, cs.n_h_tf)
        c_bar = np.zeros(lay.n_z)
        np.add.at(c_bar, lay.node1_idx.ravel(), grad_nodes.ravel())
        if cs.n_h and eta.stage2.size:
            _, jac2 = cs.eval_stage(traj.s2[:-1], traj.u2)
            hess2 = cs.stage_hessians(traj.s2[:-1], traj.u2)
            Pf = _joint_covs(K[N1 - 1:N1], sigmas[N1 - 1:N1])[0]
            Pg2 = np.einsum("de,mie->mid", Pf, jac2)
            g2 = 2.0 * np.einsum("mi,mide,mie->md", eta.stage2, hess2, Pg2)
            np.add.at(c_bar, lay.node2_idx.ravel(), g2.ravel())
        term_idx = lay.off_s2 + lay.N2 * n_s + np.arange(n_s)
    else:
        lay = SingleStageLayout(N1, n_s, n_u, cs.n_h, cs.n_h_tf)
        c_bar = np.zeros(lay.n_z)
        np.add.at(c_bar, lay.node_idx.ravel(), grad_nodes.ravel())
        term_idx = lay.off_s + lay.N * n_s + np.arange(n_s)

    if cs.n_h_tf and eta.terminal.size:
        s_term = traj.terminal_state
        _, jt = cs.eval_terminal(s_term)
        ht = cs.terminal_hessians(s_term)
        Sg = np.einsum("de,ie->id", sigmas[N1], jt)
        gt = 2.0 * np.einsum("i,ide,ie->d", eta.terminal, ht, Sg)
        np.add.at(c_bar, term_idx, gt)
    return c_bar
