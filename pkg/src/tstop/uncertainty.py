"""Covariance propagation, constraint variances, margins and dual maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Linearization
from .util import sym

Array = np.ndarray


def propagate_covariance(lin: Linearization, K: Array, Sigma: Array, Sigma_w: Array) -> Array:
    """Sigma+ = (A + B K) Sigma (A + B K)^T + G Sigma_w G^T, symmetrized."""
    C = lin.A + lin.B @ K
    out = C @ Sigma @ C.T + lin.G @ Sigma_w @ lin.G.T
    return sym(out)


def propagate_sequence(A: Array, B: Array, K: Array, Sigma0: Array, Sigma_w: Array) -> Array:
    """Propagate (N+1) covariances through the closed loop, symmetrizing each step.

    A, B: (N, n_s, n_s), (N, n_s, n_u); K: (N, n_u, n_s); noise enters with G = I.
    """
    N = A.shape[0]
    n_s = A.shape[1]
    out = np.zeros((N + 1, n_s, n_s))
    out[0] = sym(np.asarray(Sigma0, dtype=float))
    for n in range(N):
        C = A[n] + B[n] @ K[n]
        out[n + 1] = sym(C @ out[n] @ C.T + Sigma_w)
    return out


@dataclass
class CovarianceSequence:
    """Per-node state covariances; symmetric PSD enforced on construction."""

    sigmas: Array  # (N+1, n_s, n_s)

    def __post_init__(self):
        S = np.asarray(self.sigmas, dtype=float)
        if not np.array_equal(S, np.swapaxes(S, -1, -2)):
            raise ValueError("covariances must be exactly symmetric (symmetrize upstream)")
        lo = np.linalg.eigvalsh(S).min()
        if lo < -1e-10:
            raise ValueError(f"covariance not PSD (min eig {lo:.3e})")
        self.sigmas = S

    def __len__(self):
        return self.sigmas.shape[0]

    def __getitem__(self, n):
        return self.sigmas[n]


def constraint_variance_stage(grad: Array, K: Array, Sigma: Array) -> Array:
    """g^T [I; K] Sigma [I; K]^T g for stage-constraint gradients.

    grad may be (..., n_s + n_u); K: (n_u, n_s); Sigma: (n_s, n_s).
    """
    grad = np.asarray(grad, dtype=float)
    n_s = Sigma.shape[0]
    gs = grad[..., :n_s]
    gu = grad[..., n_s:]
    w = gs + gu @ K  # g^T [I; K]
    return np.einsum("...i,ij,...j->...", w, Sigma, w)


def constraint_variance_terminal(grad: Array, Sigma: Array) -> Array:
    """g^T Sigma g for terminal-constraint gradients."""
    grad = np.asarray(grad, dtype=float)
    return np.einsum("...i,ij,...j->...", grad, Sigma, grad)


def safety_margin(beta, sigma: float, eps: float):
    """Back-off sigma * sqrt(beta + eps); rejects negative variances."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < 0):
        raise ValueError("negative constraint variance (upstream bug)")
    return sigma * np.sqrt(beta + eps)


def mu_to_eta(mu, beta, sigma: float, eps: float):
    """Map inequality multipliers to variance-equality multipliers:
    eta = mu * sigma / (2 sqrt(beta + eps))."""
    mu = np.asarray(mu, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return mu * sigma / (2.0 * np.sqrt(beta + eps))


def uncertainty_cost(Sigma: Array, K: Array, R: Array) -> float:
    """tr(R [I; K] Sigma [I; K]^T)."""
    n_s = Sigma.shape[0]
    n_u = K.shape[0]
    M = np.vstack([np.eye(n_s), K])
    return float(np.trace(R @ M @ Sigma @ M.T))


def uncertainty_cost_tf(Sigma: Array, R_tf: Array) -> float:
    """tr(R_tf Sigma)."""
    return float(np.trace(R_tf @ Sigma))


def sigma_from_violation_probability(p_viol: float) -> float:
    """Standard-normal quantile of (1 - p_viol), by bisection on erf to 1e-10.

    p_viol is read as the per-constraint violation probability: the returned
    factor k satisfies 1 - C(k) = p_viol for the standard-normal CDF C. (The
    complementary reading -- p as the satisfaction probability -- would be
    sigma_from_violation_probability(1 - p).)
    """
    if not (0.0 < p_viol < 0.5):
        raise ValueError("p_viol must lie strictly between 0 and 0.5")
    target = 1.0 - p_viol

    def cdf(x: float) -> float:
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    lo, hi = 0.0, 40.0
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if cdf(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class SafetyMarginSet:
    """Frozen margins sigma * sqrt(beta + eps) with the variances they came from.

    stage1: (N1, n_h); stage2: (N2, n_h) (empty for the single-stage form);
    terminal: (n_h_tf,). Margins and betas stay consistent by construction.
    """

    stage1: Array
    stage2: Array
    terminal: Array
    beta1: Array
    beta2: Array
    beta_tf: Array
    sigma: float
    eps: float

    @classmethod
    def from_betas(cls, beta1, beta2, beta_tf, sigma: float, eps: float) -> "SafetyMarginSet":
        beta1 = np.asarray(beta1, dtype=float)
        beta2 = np.asarray(beta2, dtype=float)
        beta_tf = np.asarray(beta_tf, dtype=float)
        return cls(
            stage1=safety_margin(beta1, sigma, eps),
            stage2=safety_margin(beta2, sigma, eps),
            terminal=safety_margin(beta_tf, sigma, eps),
            beta1=beta1, beta2=beta2, beta_tf=beta_tf, sigma=sigma, eps=eps,
        )

    def validate(self, atol: float = 1e-12) -> None:
        for m, b in ((self.stage1, self.beta1), (self.stage2, self.beta2),
                     (self.terminal, self.beta_tf)):
            if m.size and np.any(m <= 0):
                raise ValueError("margins must be strictly positive")
            if m.size and np.max(np.abs(m**2 / self.sigma**2 - self.eps - b)) > atol:
                raise ValueError("margins inconsistent with stored betas")
