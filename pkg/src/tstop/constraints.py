"""Stage and terminal constraint sets for the planner.

Constraints are scalar inequalities c(.) <= 0 with gradients (and Hessians,
needed by the uncertainty-gradient corrections). Evaluation is batched over
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class EllipsoidObstacle:
    """Axis lengths are semi-axes; theta rotates the ellipse in the plane."""

    x: float
    y: float
    a: float
    b: float
    theta: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("ellipse semi-axes must be positive")

    def shape_matrix(self) -> Array:
        """Omega = R(theta)^T diag(1/a^2, 1/b^2) R(theta)."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        R = np.array([[c, s], [-s, c]])
        return R.T @ np.diag([1.0 / self.a**2, 1.0 / self.b**2]) @ R


def ellipsoid_violation(s: Array, obs: EllipsoidObstacle) -> Array:
    """1 - p^T Omega p with p the (x, y) offset from the ellipse center.

    Positive inside the ellipse, zero on the boundary, negative outside.
    """
    s = np.asarray(s, dtype=float)
    p = s[..., :2] - np.array([obs.x, obs.y])
    Om = obs.shape_matrix()
    return 1.0 - np.einsum("...i,ij,...j->...", p, Om, p)


# ---------------------------------------------------------------------------
# Constraint primitives
# ---------------------------------------------------------------------------

class StageConstraint:
    """Scalar constraint over (state, control); subclasses fill value/grad/hess."""

    name: str = "stage"

    def value(self, s: Array, u: Array) -> Array:
        raise NotImplementedError

    def grad(self, s: Array, u: Array) -> Array:
        raise NotImplementedError

    def hess(self, s: Array, u: Array) -> Array:
        """Second derivative w.r.t. vec(s, u); zero unless overridden."""
        s = np.asarray(s, dtype=float)
        d = s.shape[-1] + np.asarray(u).shape[-1]
        return np.zeros(s.shape[:-1] + (d, d))


class LinearStageConstraint(StageConstraint):
    """a_s's + a_u'u + b <= 0 (covers actuator box constraints)."""

    def __init__(self, a_s: Array, a_u: Array, b: float, name: str = "linear"):
        self.a_s = np.asarray(a_s, dtype=float)
        self.a_u = np.asarray(a_u, dtype=float)
        self.b = float(b)
        self.name = name

    def value(self, s, u):
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        return s @ self.a_s + u @ self.a_u + self.b

    def grad(self, s, u):
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        g = np.concatenate([self.a_s, self.a_u])
        batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
        return np.broadcast_to(g, batch + g.shape).copy()


class ObstacleStageConstraint(StageConstraint):
    """Ellipsoidal keep-out: 1 - p^T Omega p <= 0 (state-only, first two coords)."""

    def __init__(self, obs: EllipsoidObstacle, n_s: int, n_u: int, name: str = "obstacle"):
        self.obs = obs
        self.n_s = n_s
        self.n_u = n_u
        self.name = name

    def value(self, s, u):
        return ellipsoid_violation(s, self.obs)

    def grad(self, s, u):
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
        g = np.zeros(batch + (self.n_s + self.n_u,))
        p = s[..., :2] - np.array([self.obs.x, self.obs.y])
        g[..., :2] = -2.0 * p @ self.obs.shape_matrix()
        return g

    def hess(self, s, u):
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
        d = self.n_s + self.n_u
        H = np.zeros(batch + (d, d))
        H[..., :2, :2] = -2.0 * self.obs.shape_matrix()
        return H


class FunctionStageConstraint(StageConstraint):
    """Wraps plain callables; gradients/Hessians fall back to central differences."""

    def __init__(self, fn: Callable, n_s: int, n_u: int, grad: Optional[Callable] = None,
                 name: str = "fn"):
        self.fn = fn
        self._grad = grad
        self.n_s = n_s
        self.n_u = n_u
        self.name = name

    def value(self, s, u):
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
        if batch == ():
            return np.float64(self.fn(s, u))
        out = np.zeros(batch)
        for idx in np.ndindex(batch):
            out[idx] = self.fn(s[idx], u[idx])
        return out

    def grad(self, s, u):
        if self._grad is not None:
            s = np.asarray(s, dtype=float)
            u = np.asarray(u, dtype=float)
            batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
            if batch == ():
                return np.asarray(self._grad(s, u), dtype=float)
            out = np.zeros(batch + (self.n_s + self.n_u,))
            for idx in np.ndindex(batch):
                out[idx] = self._grad(s[idx], u[idx])
            return out
        return _fd_grad_stage(self.value, s, u, self.n_s, self.n_u)

    def hess(self, s, u):
        return _fd_hess_stage(self.grad, s, u, self.n_s, self.n_u)


class TerminalConstraint:
    """Scalar constraint over the terminal state."""

    name: str = "terminal"

    def value(self, s: Array) -> Array:
        raise NotImplementedError

    def grad(self, s: Array) -> Array:
        raise NotImplementedError

    def hess(self, s: Array) -> Array:
        s = np.asarray(s, dtype=float)
        d = s.shape[-1]
        return np.zeros(s.shape[:-1] + (d, d))


class LinearTerminalConstraint(TerminalConstraint):
    def __init__(self, a: Array, b: float, name: str = "terminal-linear"):
        self.a = np.asarray(a, dtype=float)
        self.b = float(b)
        self.name = name

    def value(self, s):
        return np.asarray(s, dtype=float) @ self.a + self.b

    def grad(self, s):
        s = np.asarray(s, dtype=float)
        return np.broadcast_to(self.a, s.shape[:-1] + self.a.shape).copy()


def _fd_grad_stage(value, s, u, n_s, n_u):
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
    s = np.broadcast_to(s, batch + (n_s,)).copy()
    u = np.broadcast_to(u, batch + (n_u,)).copy()
    g = np.zeros(batch + (n_s + n_u,))
    for j in range(n_s):
        h = 1e-6 * (1.0 + np.abs(s[..., j]))
        sp, sm = s.copy(), s.copy()
        sp[..., j] += h
        sm[..., j] -= h
        g[..., j] = (value(sp, u) - value(sm, u)) / (2.0 * h)
    for j in range(n_u):
        h = 1e-6 * (1.0 + np.abs(u[..., j]))
        up, um = u.copy(), u.copy()
        up[..., j] += h
        um[..., j] -= h
        g[..., n_s + j] = (value(s, up) - value(s, um)) / (2.0 * h)
    return g


def _fd_hess_stage(grad, s, u, n_s, n_u):
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
    s = np.broadcast_to(s, batch + (n_s,)).copy()
    u = np.broadcast_to(u, batch + (n_u,)).copy()
    d = n_s + n_u
    H = np.zeros(batch + (d, d))
    for j in range(d):
        if j < n_s:
            h = 1e-5 * (1.0 + np.abs(s[..., j]))
            sp, sm = s.copy(), s.copy()
            sp[..., j] += h
            sm[..., j] -= h
            H[..., :, j] = (grad(sp, u) - grad(sm, u)) / (2.0 * h[..., None])
        else:
            h = 1e-5 * (1.0 + np.abs(u[..., j - n_s]))
            up, um = u.copy(), u.copy()
            up[..., j - n_s] += h
            um[..., j - n_s] -= h
            H[..., :, j] = (grad(s, up) - grad(s, um)) / (2.0 * h[..., None])
    return 0.5 * (H + np.swapaxes(H, -1, -2))


# ---------------------------------------------------------------------------
# Constraint set
# ---------------------------------------------------------------------------

@dataclass
class ConstraintSet:
    """Ordered stage and terminal constraints with stacked evaluation."""

    stage: list = field(default_factory=list)
    terminal: list = field(default_factory=list)
    n_s: int = 0
    n_u: int = 0

    @property
    def n_h(self) -> int:
        return len(self.stage)

    @property
    def n_h_tf(self) -> int:
        return len(self.terminal)

    def eval_stage(self, s: Array, u: Array) -> tuple[Array, Array]:
        """Stacked values (..., n_h) and Jacobian (..., n_h, n_s + n_u)."""
        vals = np.stack([c.value(s, u) for c in self.stage], axis=-1)
        jac = np.stack([c.grad(s, u) for c in self.stage], axis=-2)
        return vals, jac

    def eval_terminal(self, s: Array) -> tuple[Array, Array]:
        if not self.terminal:
            s = np.asarray(s, dtype=float)
            return (np.zeros(s.shape[:-1] + (0,)),
                    np.zeros(s.shape[:-1] + (0, self.n_s)))
        vals = np.stack([c.value(s) for c in self.terminal], axis=-1)
        jac = np.stack([c.grad(s) for c in self.terminal], axis=-2)
        return vals, jac

    def stage_hessians(self, s: Array, u: Array) -> Array:
        """Stacked (..., n_h, d, d) second derivatives of the stage constraints."""
        return np.stack([c.hess(s, u) for c in self.stage], axis=-3)

    def terminal_hessians(self, s: Array) -> Array:
        s = np.asarray(s, dtype=float)
        if not self.terminal:
            return np.zeros(s.shape[:-1] + (0, self.n_s, self.n_s))
        return np.stack([c.hess(s) for c in self.terminal], axis=-3)


@dataclass(frozen=True)
class ControlBounds:
    v_min: float
    v_max: float
    omega_min: float
    omega_max: float


def unicycle_constraint_set(
    bounds: ControlBounds,
    obstacles: Sequence[EllipsoidObstacle],
    s_tf: Array,
    terminal_halfwidth: Optional[float],
) -> ConstraintSet:
    """The planar-scenario constraint family, in a fixed declaration order.

    Stage rows: v - v_max, v_min - v, omega - omega_max, omega_min - omega,
    then one ellipsoid keep-out row per obstacle. Terminal rows (when a
    halfwidth is given): a symmetric box around s_tf as 2 * n_s one-sided
    constraints.
    """
    n_s, n_u = 3, 2
    z3 = np.zeros(3)
    stage = [
        LinearStageConstraint(z3, [1.0, 0.0], -bounds.v_max, name="v_max"),
        LinearStageConstraint(z3, [-1.0, 0.0], bounds.v_min, name="v_min"),
        LinearStageConstraint(z3, [0.0, 1.0], -bounds.omega_max, name="omega_max"),
        LinearStageConstraint(z3, [0.0, -1.0], bounds.omega_min, name="omega_min"),
    ]
    for k, obs in enumerate(obstacles):
        stage.append(ObstacleStageConstraint(obs, n_s, n_u, name=f"obstacle_{k}"))

    terminal: list = []
    if terminal_halfwidth is not None:
        s_tf = np.asarray(s_tf, dtype=float)
        for i in range(n_s):
            e = np.zeros(n_s)
            e[i] = 1.0
            terminal.append(LinearTerminalConstraint(e, -s_tf[i] - terminal_halfwidth,
                                                     name=f"tf_hi_{i}"))
            terminal.append(LinearTerminalConstraint(-e, s_tf[i] - terminal_halfwidth,
                                                     name=f"tf_lo_{i}"))
    return ConstraintSet(stage=stage, terminal=terminal, n_s=n_s, n_u=n_u)
