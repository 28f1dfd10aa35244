"""Discrete-time system models: RK4 integration and linearization.

All operations accept batched states/controls (leading axes broadcast), which
the transcription and Monte Carlo layers rely on for speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .util import assert_psd, sym

Array = np.ndarray


@dataclass(frozen=True)
class Linearization:
    """Jacobians of the discrete step map: A (state), B (control), G (noise)."""

    A: Array
    B: Array
    G: Array


@dataclass(frozen=True)
class SystemModel:
    """Continuous-dynamics model with sampling time and process-noise covariance.

    rhs(s, u) -> ds/dt must broadcast over leading batch axes. rhs_jac, when
    given, returns the analytic Jacobians (dfds, dfdu) and enables
    exact-to-roundoff linearization of the RK4 step map.
    """

    n_s: int
    n_u: int
    rhs: Callable[[Array, Array], Array]
    t_s: float
    Sigma_w: Array
    rhs_jac: Optional[Callable[[Array, Array], tuple[Array, Array]]] = None
    name: str = "model"

    def __post_init__(self):
        if self.n_s < 1 or self.n_u < 1:
            raise ValueError("state and control dimensions must be >= 1")
        if self.t_s <= 0:
            raise ValueError("sampling time must be positive")
        Sw = np.asarray(self.Sigma_w, dtype=float)
        if Sw.shape != (self.n_s, self.n_s):
            raise ValueError(f"Sigma_w must be {self.n_s}x{self.n_s}")
        if not np.allclose(Sw, Sw.T, atol=1e-12):
            raise ValueError("Sigma_w must be symmetric")
        assert_psd(Sw, what="Sigma_w")
        object.__setattr__(self, "Sigma_w", Sw)


# ---------------------------------------------------------------------------
# Unicycle instance
# ---------------------------------------------------------------------------

def unicycle_rhs(s: Array, u: Array) -> Array:
    """Kinematic unicycle: d/dt [x, y, theta] = [v cos(theta), v sin(theta), omega]."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    th = s[..., 2]
    v = u[..., 0]
    om = u[..., 1]
    return np.stack([v * np.cos(th), v * np.sin(th), om], axis=-1)


def unicycle_rhs_jac(s: Array, u: Array) -> tuple[Array, Array]:
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    th = s[..., 2]
    v = u[..., 0]
    batch = np.broadcast_shapes(th.shape, v.shape)
    Js = np.zeros(batch + (3, 3))
    Ju = np.zeros(batch + (3, 2))
    Js[..., 0, 2] = -v * np.sin(th)
    Js[..., 1, 2] = v * np.cos(th)
    Ju[..., 0, 0] = np.cos(th)
    Ju[..., 1, 0] = np.sin(th)
    Ju[..., 2, 1] = 1.0
    return Js, Ju


def unicycle_model(t_s: float = 0.02, Sigma_w: Optional[Array] = None) -> SystemModel:
    if Sigma_w is None:
        Sigma_w = np.zeros((3, 3))
    return SystemModel(
        n_s=3, n_u=2, rhs=unicycle_rhs, t_s=t_s, Sigma_w=np.asarray(Sigma_w, dtype=float),
        rhs_jac=unicycle_rhs_jac, name="unicycle",
    )


# ---------------------------------------------------------------------------
# RK4 integration and sensitivities
# ---------------------------------------------------------------------------

def integrate_step(model: SystemModel, s: Array, u: Array, dt: float) -> Array:
    """One fixed-step RK4 step of the noise-free dynamics with zero-order-hold u."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    f = model.rhs
    k1 = f(s, u)
    k2 = f(s + 0.5 * dt * k1, u)
    k3 = f(s + 0.5 * dt * k2, u)
    k4 = f(s + dt * k3, u)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_chain(model: SystemModel, S: Array, U: Array, dt: float):
    """Stage values and per-stage Jacobians for the RK4 map (analytic path)."""
    f, jac = model.rhs, model.rhs_jac
    s1 = S
    k1 = f(s1, U)
    J1s, J1u = jac(s1, U)
    s2 = S + 0.5 * dt * k1
    k2 = f(s2, U)
    J2s, J2u = jac(s2, U)
    s3 = S + 0.5 * dt * k2
    k3 = f(s3, U)
    J3s, J3u = jac(s3, U)
    s4 = S + dt * k3
    k4 = f(s4, U)
    J4s, J4u = jac(s4, U)
    return (k1, k2, k3, k4), (J1s, J2s, J3s, J4s), (J1u, J2u, J3u, J4u)


def linearize_traj(model: SystemModel, S: Array, U: Array, dt: float) -> tuple[Array, Array]:
    """Jacobians (A, B) of the RK4 step map at each point of a batch.

    Uses exact chain-rule propagation through the RK4 stages when the model
    provides analytic rhs Jacobians, otherwise central finite differences on
    the integrated map (relative step 1e-6).
    """
    S = np.asarray(S, dtype=float)
    U = np.asarray(U, dtype=float)
    n_s, n_u = model.n_s, model.n_u
    if model.rhs_jac is not None:
        ks, Jss, Jus = _rk4_chain(model, S, U, dt)
        J1s, J2s, J3s, J4s = Jss
        J1u, J2u, J3u, J4u = Jus
        batch = J1s.shape[:-2]
        eye = np.broadcast_to(np.eye(n_s), batch + (n_s, n_s))
        D1s = J1s
        D1u = J1u
        D2s = J2s @ (eye + 0.5 * dt * D1s)
        D2u = J2u + J2s @ (0.5 * dt * D1u)
        D3s = J3s @ (eye + 0.5 * dt * D2s)
        D3u = J3u + J3s @ (0.5 * dt * D2u)
        D4s = J4s @ (eye + dt * D3s)
        D4u = J4u + J4s @ (dt * D3u)
        A = eye + (dt / 6.0) * (D1s + 2.0 * D2s + 2.0 * D3s + D4s)
        B = (dt / 6.0) * (D1u + 2.0 * D2u + 2.0 * D3u + D4u)
        return A, B

    batch = np.broadcast_shapes(S.shape[:-1], U.shape[:-1])
    S = np.broadcast_to(S, batch + (n_s,)).copy()
    U = np.broadcast_to(U, batch + (n_u,)).copy()
    A = np.zeros(batch + (n_s, n_s))
    B = np.zeros(batch + (n_s, n_u))
    for j in range(n_s):
        h = 1e-6 * (1.0 + np.abs(S[..., j]))
        Sp, Sm = S.copy(), S.copy()
        Sp[..., j] += h
        Sm[..., j] -= h
        A[..., :, j] = (integrate_step(model, Sp, U, dt) - integrate_step(model, Sm, U, dt)) / (2.0 * h[..., None])
    for j in range(n_u):
        h = 1e-6 * (1.0 + np.abs(U[..., j]))
        Up, Um = U.copy(), U.copy()
        Up[..., j] += h
        Um[..., j] -= h
        B[..., :, j] = (integrate_step(model, S, Up, dt) - integrate_step(model, S, Um, dt)) / (2.0 * h[..., None])
    return A, B


def step_dt_gradient(model: SystemModel, S: Array, U: Array, dt: float) -> Array:
    """d/d(dt) of the RK4 step map (analytic chain rule, or central FD fallback)."""
    S = np.asarray(S, dtype=float)
    U = np.asarray(U, dtype=float)
    if model.rhs_jac is not None:
        ks, Jss, Jus = _rk4_chain(model, S, U, dt)
        k1, k2, k3, k4 = ks
        _, J2s, J3s, J4s = Jss
        dk1 = np.zeros_like(k1)
        dk2 = np.einsum("...ij,...j->...i", J2s, 0.5 * k1 + 0.5 * dt * dk1)
        dk3 = np.einsum("...ij,...j->...i", J3s, 0.5 * k2 + 0.5 * dt * dk2)
        dk4 = np.einsum("...ij,...j->...i", J4s, k3 + dt * dk3)
        return (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0 + (dt / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)
    h = 1e-6 * (1.0 + abs(dt))
    return (integrate_step(model, S, U, dt + h) - integrate_step(model, S, U, dt - h)) / (2.0 * h)


def linearize(model: SystemModel, s: Array, u: Array, dt: float) -> Linearization:
    """Jacobians of integrate_step at (s, u); noise enters additively so G = I."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A, B = linearize_traj(model, np.asarray(s, dtype=float), np.asarray(u, dtype=float), dt)
    return Linearization(A=A, B=B, G=np.eye(model.n_s))


def simulate_nominal(model: SystemModel, s0: Array, U: Array, dt: float) -> Array:
    """Roll the noise-free dynamics: returns states (N+1, n_s) for controls (N, n_u)."""
    U = np.asarray(U, dtype=float)
    N = U.shape[0]
    S = np.zeros((N + 1, model.n_s))
    S[0] = np.asarray(s0, dtype=float)
    for k in range(N):
        S[k + 1] = integrate_step(model, S[k], U[k], dt)
    return S
