import numpy as np
import pytest

from tstop.constraints import (ControlBounds, EllipsoidObstacle,
                               unicycle_constraint_set)
from tstop.gains import (EtaSet, NominalTrajectories, RegularizerSequence,
                         assemble_regularizers, assemble_regularizers_single,
                         gain_stationarity, riccati_recursion,
                         solve_gain_subproblem)
from tstop.model import SystemModel, unicycle_model
from tstop.uncertainty import propagate_sequence
from tstop.util import sym


def _regs(R_list, R_tf, n_s):
    return RegularizerSequence(R=np.asarray(R_list, dtype=float),
                               R_tf=np.asarray(R_tf, dtype=float), n_s=n_s)


def test_riccati_scalar_closed_form():
    regs = _regs([np.eye(2)], np.eye(1), n_s=1)  # R^s = R^u = 1, R^su = 0
    gains = riccati_recursion(np.ones((1, 1, 1)), np.ones((1, 1, 1)), regs)
    assert gains.K[0, 0, 0] == pytest.approx(-0.5)
    assert gains.S[0, 0, 0] == pytest.approx(1.5)


def test_riccati_uncontrollable_channel():
    N = 4
    regs = _regs(np.tile(np.eye(3), (N, 1, 1)), np.eye(2), n_s=2)
    A = np.tile(np.array([[0.9, 0.1], [0.0, 0.8]]), (N, 1, 1))
    B = np.zeros((N, 2, 1))
    gains = riccati_recursion(A, B, regs)
    np.testing.assert_allclose(gains.K, 0.0)


def test_riccati_matches_infinite_horizon_fixed_point():
    rng = np.random.default_rng(0)
    n_s, n_u, N = 3, 2, 220
    A0 = rng.normal(size=(n_s, n_s)) * 0.4
    B0 = rng.normal(size=(n_s, n_u))
    Rs = np.eye(n_s)
    Ru = np.eye(n_u)
    R = np.zeros((n_s + n_u, n_s + n_u))
    R[:n_s, :n_s] = Rs
    R[n_s:, n_s:] = Ru
    regs = _regs(np.tile(R, (N, 1, 1)), np.eye(n_s), n_s=n_s)
    gains = riccati_recursion(np.tile(A0, (N, 1, 1)), np.tile(B0, (N, 1, 1)), regs)
    # fixed-point iteration of the algebraic Riccati map
    S = np.eye(n_s)
    for _ in range(3000):
        K = -np.linalg.solve(Ru + B0.T @ S @ B0, B0.T @ S @ A0)
        S = sym(Rs + A0.T @ S @ A0 + (A0.T @ S @ B0) @ K)
    K_inf = -np.linalg.solve(Ru + B0.T @ S @ B0, B0.T @ S @ A0)
    assert np.max(np.abs(gains.K[0] - K_inf)) < 1e-8


def test_riccati_invariant_under_symmetrization():
    rng = np.random.default_rng(1)
    N, n_s, n_u = 3, 2, 1
    A = rng.normal(size=(N, n_s, n_s))
    B = rng.normal(size=(N, n_s, n_u))
    R = np.tile(np.eye(n_s + n_u), (N, 1, 1))
    skew = rng.normal(size=(n_s + n_u, n_s + n_u)) * 1e-14
    R_perturbed = R + (skew - skew.T)
    g1 = riccati_recursion(A, B, _regs(R, np.eye(n_s), n_s))
    g2 = riccati_recursion(A, B, _regs(sym(R_perturbed), np.eye(n_s), n_s))
    np.testing.assert_allclose(g1.K, g2.K, atol=1e-12)


def test_riccati_cost_to_go_psd():
    rng = np.random.default_rng(2)
    N, n_s, n_u = 6, 3, 2
    A = rng.normal(size=(N, n_s, n_s))
    B = rng.normal(size=(N, n_s, n_u))
    W = rng.normal(size=(n_s + n_u, n_s + n_u))
    R = np.tile(W @ W.T + 0.1 * np.eye(n_s + n_u), (N, 1, 1))
    gains = riccati_recursion(A, B, _regs(R, np.eye(n_s) * 0.5, n_s))
    for S in gains.S:
        assert np.linalg.eigvalsh(S).min() > -1e-10


def _paper_cs():
    bounds = ControlBounds(0.0, 0.5, -np.pi / 4, np.pi / 4)
    obs = EllipsoidObstacle(1.25, 0.5, 1.0, 0.5, np.pi / 6)
    return unicycle_constraint_set(bounds, [obs], np.array([2.5, 1.0, 0.0]), 0.05)


def _small_two_stage_traj(rng, N1=4, N2=3):
    s1 = rng.normal(size=(N1 + 1, 3)) * 0.3 + np.array([1.0, 0.6, 0.0])
    u1 = rng.normal(size=(N1, 2)) * 0.1
    s2 = rng.normal(size=(N2 + 1, 3)) * 0.3 + np.array([2.0, 0.8, 0.0])
    u2 = rng.normal(size=(N2, 2)) * 0.1
    return NominalTrajectories(s1=s1, u1=u1, s2=s2, u2=u2, T2=1.0)


def test_assemble_regularizers_zero_eta_identity():
    rng = np.random.default_rng(3)
    cs = _paper_cs()
    traj = _small_two_stage_traj(rng)
    eta = EtaSet.zeros(4, 3, cs.n_h, cs.n_h_tf)
    regs = assemble_regularizers(traj, eta, np.eye(5), 50 * np.eye(3), cs)
    np.testing.assert_allclose(regs.R, np.tile(np.eye(5), (4, 1, 1)))
    np.testing.assert_allclose(regs.R_tf, 50 * np.eye(3))


def test_assemble_regularizers_rank_one_outer_product():
    rng = np.random.default_rng(4)
    cs = _paper_cs()
    traj = _small_two_stage_traj(rng)
    eta = EtaSet.zeros(4, 3, cs.n_h, cs.n_h_tf)
    eta.stage1[1, 4] = 2.0  # obstacle row at node 1
    regs = assemble_regularizers(traj, eta, np.zeros((5, 5)), np.zeros((3, 3)), cs)
    _, jac = cs.eval_stage(traj.s1[1], traj.u1[1])
    g = jac[4]
    np.testing.assert_allclose(regs.R[1], 2.0 * np.outer(g, g), atol=1e-14)
    np.testing.assert_allclose(regs.R[0], 0.0)
    assert np.linalg.matrix_rank(regs.R[1], tol=1e-10) == 1


def test_assemble_regularizers_stage2_lumps_into_last_node():
    rng = np.random.default_rng(5)
    cs = _paper_cs()
    traj = _small_two_stage_traj(rng)
    eta = EtaSet.zeros(4, 3, cs.n_h, cs.n_h_tf)
    eta.stage2[:, 0] = 1.0
    regs = assemble_regularizers(traj, eta, np.eye(5), np.eye(3), cs)
    np.testing.assert_allclose(regs.R[:3], np.tile(np.eye(5), (3, 1, 1)))
    assert np.max(np.abs(regs.R[3] - np.eye(5))) > 0
    _, jac2 = cs.eval_stage(traj.s2[:-1], traj.u2)
    expected = np.eye(5) + sum(np.outer(jac2[m, 0], jac2[m, 0]) for m in range(3))
    np.testing.assert_allclose(regs.R[3], expected, atol=1e-14)


def test_assemble_regularizers_terminal_into_R_tf():
    rng = np.random.default_rng(6)
    cs = _paper_cs()
    traj = _small_two_stage_traj(rng)
    eta = EtaSet.zeros(4, 3, cs.n_h, cs.n_h_tf)
    eta.terminal[0] = 3.0
    regs = assemble_regularizers(traj, eta, np.eye(5), np.eye(3), cs)
    _, jt = cs.eval_terminal(traj.s2[-1])
    np.testing.assert_allclose(regs.R_tf, np.eye(3) + 3.0 * np.outer(jt[0], jt[0]),
                               atol=1e-14)


def test_assemble_regularizers_rejects_negative_eta():
    rng = np.random.default_rng(7)
    cs = _paper_cs()
    traj = _small_two_stage_traj(rng)
    eta = EtaSet.zeros(4, 3, cs.n_h, cs.n_h_tf)
    eta.stage1[0, 0] = -1.0
    with pytest.raises(ValueError):
        assemble_regularizers(traj, eta, np.eye(5), np.eye(3), cs)


def test_solve_gain_subproblem_no_uncertainty():
    model = unicycle_model(t_s=0.02, Sigma_w=np.zeros((3, 3)))
    rng = np.random.default_rng(8)
    cs = _paper_cs()
    traj = _small_two_stage_traj(rng)
    eta = EtaSet.zeros(4, 3, cs.n_h, cs.n_h_tf)
    gains, cov = solve_gain_subproblem(model, traj, eta, np.zeros((3, 3)),
                                       np.eye(5), 50 * np.eye(3), cs)
    np.testing.assert_allclose(cov.sigmas, 0.0)


def _random_linear_model(rng, n_s, n_u):
    F = rng.normal(size=(n_s, n_s)) * 0.3
    E = rng.normal(size=(n_s, n_u))
    return SystemModel(
        n_s=n_s, n_u=n_u,
        rhs=lambda s, u: s @ F.T + u @ E.T,
        t_s=0.1, Sigma_w=np.eye(n_s) * 0.05,
        rhs_jac=lambda s, u: (np.broadcast_to(F, s.shape[:-1] + (n_s, n_s)),
                              np.broadcast_to(E, s.shape[:-1] + (n_s, n_u))),
    )


def _gain_objective(model, traj, regs, K, Sigma_t0):
    from tstop.model import linearize_traj
    A, B = linearize_traj(model, traj.s1[:-1], traj.u1, model.t_s)
    sig = propagate_sequence(A, B, K, Sigma_t0, model.Sigma_w)
    N = K.shape[0]
    val = 0.0
    for n in range(N):
        M = np.vstack([np.eye(model.n_s), K[n]])
        val += np.trace(regs.R[n] @ M @ sig[n] @ M.T)
    return val + np.trace(regs.R_tf @ sig[N])


def test_gain_subproblem_fd_stationarity_and_convexity():
    rng = np.random.default_rng(9)
    n_s, n_u, N1 = 2, 1, 3
    model = _random_linear_model(rng, n_s, n_u)
    from tstop.constraints import ConstraintSet, LinearStageConstraint
    cs = ConstraintSet(stage=[LinearStageConstraint(rng.normal(size=n_s),
                                                    rng.normal(size=n_u), 0.0)],
                       terminal=[], n_s=n_s, n_u=n_u)
    traj = NominalTrajectories(s1=rng.normal(size=(N1 + 1, n_s)),
                               u1=rng.normal(size=(N1, n_u)))
    eta = EtaSet(stage1=rng.uniform(0.1, 1.0, size=(N1, 1)),
                 stage2=np.zeros((0, 1)), terminal=np.zeros(0))
    Sigma_t0 = np.eye(n_s) * 0.2
    R_regu = np.eye(n_s + n_u)
    R_tf = np.eye(n_s) * 2.0
    gains, cov = solve_gain_subproblem(model, traj, eta, Sigma_t0, R_regu, R_tf, cs)
    regs = assemble_regularizers_single(traj, eta, R_regu, R_tf, cs)

    K0 = gains.K
    f0 = _gain_objective(model, traj, regs, K0, Sigma_t0)
    # finite-difference gradient should vanish at the Riccati gains
    for n in range(N1):
        for i in range(n_u):
            for j in range(n_s):
                h = 1e-6
                Kp, Km = K0.copy(), K0.copy()
                Kp[n, i, j] += h
                Km[n, i, j] -= h
                fd = (_gain_objective(model, traj, regs, Kp, Sigma_t0)
                      - _gain_objective(model, traj, regs, Km, Sigma_t0)) / (2 * h)
                assert abs(fd) < 1e-5
    # random perturbations never decrease the objective
    for _ in range(20):
        dK = rng.normal(size=K0.shape) * 1e-3
        assert _gain_objective(model, traj, regs, K0 + dK, Sigma_t0) >= f0 - 1e-10


def test_gain_stationarity_zero_at_solution():
    rng = np.random.default_rng(10)
    model = unicycle_model(t_s=0.02, Sigma_w=np.diag([1e-6, 1e-6, 3.0625e-6]))
    cs = _paper_cs()
    traj = _small_two_stage_traj(rng)
    eta = EtaSet(stage1=rng.uniform(0, 0.5, size=(4, cs.n_h)),
                 stage2=rng.uniform(0, 0.5, size=(3, cs.n_h)),
                 terminal=rng.uniform(0, 0.5, size=cs.n_h_tf))
    gains, cov = solve_gain_subproblem(model, traj, eta, np.eye(3) * 1e-5,
                                       np.eye(5), 50 * np.eye(3), cs)
    from tstop.model import linearize_traj
    A, B = linearize_traj(model, traj.s1[:-1], traj.u1, model.t_s)
    regs = assemble_regularizers(traj, eta, np.eye(5), 50 * np.eye(3), cs)
    res = gain_stationarity(A, B, regs, gains, cov.sigmas)
    assert np.max(np.abs(res)) < 1e-12
