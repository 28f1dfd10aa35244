"""Feedback-gain subproblem: dual-weighted regularizers and Riccati recursion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constraints import ConstraintSet
from .model import SystemModel, linearize_traj
from .uncertainty import CovarianceSequence, propagate_sequence
from .util import sym

Array = np.ndarray


@dataclass
class NominalTrajectories:
    """Nominal state/control trajectories; stage 2 is absent in single-stage form."""

    s1: Array                 # (N1+1, n_s)
    u1: Array                 # (N1, n_u)
    s2: Optional[Array] = None  # (N2+1, n_s)
    u2: Optional[Array] = None  # (N2, n_u)
    T2: Optional[float] = None

    @property
    def two_stage(self) -> bool:
        return self.s2 is not None

    @property
    def terminal_state(self) -> Array:
        return self.s2[-1] if self.two_stage else self.s1[-1]


@dataclass
class EtaSet:
    """Variance-equality multipliers, grouped like the margin arrays."""

    stage1: Array    # (N1, n_h)
    stage2: Array    # (N2, n_h); empty in single-stage form
    terminal: Array  # (n_h_tf,)

    @classmethod
    def zeros(cls, N1: int, N2: int, n_h: int, n_h_tf: int) -> "EtaSet":
        return cls(np.zeros((N1, n_h)), np.zeros((N2, n_h)), np.zeros(n_h_tf))


@dataclass
class RegularizerSequence:
    """Per-node regularizers R_n ((n_s+n_u) square) and terminal R_tf (n_s square)."""

    R: Array      # (N, d, d)
    R_tf: Array   # (n_s, n_s)
    n_s: int

    def blocks(self, n: int) -> tuple[Array, Array, Array]:
        """Split R_n into (R^s, R^su, R^u)."""
        ns = self.n_s
        Rn = self.R[n]
        return Rn[:ns, :ns], Rn[:ns, ns:], Rn[ns:, ns:]


@dataclass
class GainSequence:
    """Time-varying feedback gains; the cost-to-go S is kept for diagnostics."""

    K: Array            # (N, n_u, n_s)
    S: Optional[Array] = None  # (N+1, n_s, n_s)

    def __len__(self):
        return self.K.shape[0]


def _outer_accumulate(R: Array, jac: Array, eta_w: Array) -> None:
    """R += sum_i eta_i g_i g_i^T for each node; jac (N, n_h, d), eta_w (N, n_h)."""
    R += np.einsum("ni,nid,nie->nde", eta_w, jac, jac)


def assemble_regularizers(
    traj: NominalTrajectories,
    eta: EtaSet,
    R_regu: Array,
    R_regu_tf: Array,
    cs: ConstraintSet,
) -> RegularizerSequence:
    """Dual-weighted regularizers for the two-stage gain subproblem.

    R_{1,n} = R_regu + sum_i eta1[n,i] g g^T; the node N1-1 additionally lumps
    every stage-2 constraint's outer product (stage-2 margins are derived from
    the stage-1 tail covariance), and R_tf lumps the terminal constraints.
    """
    if np.any(eta.stage1 < 0) or np.any(eta.stage2 < 0) or np.any(eta.terminal < 0):
        raise ValueError("eta must be elementwise nonnegative")
    N1 = traj.u1.shape[0]
    d = R_regu.shape[0]
    R = np.tile(sym(np.asarray(R_regu, dtype=float)), (N1, 1, 1))
    if N1 > 0 and eta.stage1.size:
        _, jac1 = cs.eval_stage(traj.s1[:-1], traj.u1)
        _outer_accumulate(R, jac1, eta.stage1)
    if traj.two_stage and N1 > 0 and eta.stage2.size:
        _, jac2 = cs.eval_stage(traj.s2[:-1], traj.u2)
        R[N1 - 1] += np.einsum("mi,mid,mie->de", eta.stage2, jac2, jac2)

    R_tf = sym(np.asarray(R_regu_tf, dtype=float)).copy()
    if eta.terminal.size:
        _, jac_tf = cs.eval_terminal(traj.terminal_state)
        R_tf += np.einsum("i,id,ie->de", eta.terminal, jac_tf, jac_tf)
    return RegularizerSequence(R=sym(R), R_tf=sym(R_tf), n_s=cs.n_s)


def assemble_regularizers_single(
    traj: NominalTrajectories,
    eta: EtaSet,
    R_regu: Array,
    R_regu_tf: Array,
    cs: ConstraintSet,
) -> RegularizerSequence:
    """Single-stage variant: every node keeps its own eta row, no lumping."""
    if np.any(eta.stage1 < 0) or np.any(eta.terminal < 0):
        raise ValueError("eta must be elementwise nonnegative")
    N = traj.u1.shape[0]
    R = np.tile(sym(np.asarray(R_regu, dtype=float)), (N, 1, 1))
    if N > 0 and eta.stage1.size:
        _, jac = cs.eval_stage(traj.s1[:-1], traj.u1)
        _outer_accumulate(R, jac, eta.stage1)
    R_tf = sym(np.asarray(R_regu_tf, dtype=float)).copy()
    if eta.terminal.size:
        _, jac_tf = cs.eval_terminal(traj.s1[-1])
        R_tf += np.einsum("i,id,ie->de", eta.terminal, jac_tf, jac_tf)
    return RegularizerSequence(R=sym(R), R_tf=sym(R_tf), n_s=cs.n_s)


def _solve_gain_system(M: Array, rhs: Array) -> Array:
    """K = -M^{-1} rhs with a pseudoinverse fallback for degenerate regularizers."""
    w = np.linalg.eigvalsh(M)
    if w[0] <= 1e-12 * max(1.0, w[-1]):
        return -np.linalg.pinv(M, rcond=1e-12) @ rhs
    return -np.linalg.solve(M, rhs)


def riccati_recursion(A: Array, B: Array, regs: RegularizerSequence) -> GainSequence:
    """Backward Riccati sweep returning the unique gain sequence.

    S_N = R_tf;  K_n = -(R^u + B^T S' B)^{-1} (R^{su T} + B^T S' A);
    S_n = R^s + A^T S' A + (R^{su} + A^T S' B) K_n, symmetrized each step.
    """
    N = A.shape[0]
    n_s = A.shape[1]
    n_u = B.shape[2]
    K = np.zeros((N, n_u, n_s))
    S = np.zeros((N + 1, n_s, n_s))
    S[N] = sym(regs.R_tf)
    for n in range(N - 1, -1, -1):
        Rs, Rsu, Ru = regs.blocks(n)
        An, Bn = A[n], B[n]
        Sn1 = S[n + 1]
        M = Ru + Bn.T @ Sn1 @ Bn
        rhs = Rsu.T + Bn.T @ Sn1 @ An
        K[n] = _solve_gain_system(sym(M), rhs)
        S[n] = sym(Rs + An.T @ Sn1 @ An + (Rsu + An.T @ Sn1 @ Bn) @ K[n])
        if not np.all(np.isfinite(S[n])) or not np.all(np.isfinite(K[n])):
            raise FloatingPointError("Riccati recursion produced non-finite values "
                                     "(ill-conditioned regularizer)")
    return GainSequence(K=K, S=S)


def gain_stationarity(A: Array, B: Array, regs: RegularizerSequence,
                      gains: GainSequence, sigmas: Array) -> Array:
    """Gradient of the gain-subproblem objective at (K, Sigma): (N, n_u, n_s).

    dJ/dK_n = 2 [(R^u + B^T S' B) K_n + R^{su T} + B^T S' A] Sigma_n, with S the
    backward adjoint; identically zero at the Riccati solution.
    """
    N = A.shape[0]
    n_s, n_u = A.shape[1], B.shape[2]
    S = np.zeros((N + 1, n_s, n_s))
    S[N] = sym(regs.R_tf)
    grad = np.zeros((N, n_u, n_s))
    # backward adjoint S_n = W_n + C_n^T S_{n+1} C_n with W_n = [I;K]^T R_n [I;K]
    for n in range(N - 1, -1, -1):
        Rs, Rsu, Ru = regs.blocks(n)
        An, Bn, Kn = A[n], B[n], gains.K[n]
        Sn1 = S[n + 1]
        grad[n] = 2.0 * ((Ru + Bn.T @ Sn1 @ Bn) @ Kn + Rsu.T + Bn.T @ Sn1 @ An) @ sigmas[n]
        C = An + Bn @ Kn
        W = Rs + Rsu @ Kn + Kn.T @ Rsu.T + Kn.T @ Ru @ Kn
        S[n] = sym(W + C.T @ Sn1 @ C)
    return grad


def solve_gain_subproblem(
    model: SystemModel,
    traj: NominalTrajectories,
    eta: EtaSet,
    Sigma_t0: Array,
    R_regu: Array,
    R_regu_tf: Array,
    cs: ConstraintSet,
) -> tuple[GainSequence, CovarianceSequence]:
    """Assemble regularizers, run the Riccati sweep, and propagate covariances.

    Two-stage trajectories use the lumped assembly over the stage-1 horizon;
    single-stage ones use the per-node assembly over the full horizon.
    """
    if traj.two_stage:
        regs = assemble_regularizers(traj, eta, R_regu, R_regu_tf, cs)
    else:
        regs = assemble_regularizers_single(traj, eta, R_regu, R_regu_tf, cs)
    A, B = linearize_traj(model, traj.s1[:-1], traj.u1, model.t_s)
    gains = riccati_recursion(A, B, regs)
    sig = propagate_sequence(A, B, gains.K, Sigma_t0, model.Sigma_w)
    return gains, CovarianceSequence(sigmas=sig)
