import numpy as np
import pytest

from tstop.model import Linearization
from tstop.uncertainty import (CovarianceSequence, SafetyMarginSet,
                               constraint_variance_stage,
                               constraint_variance_terminal, mu_to_eta,
                               propagate_covariance, propagate_sequence,
                               safety_margin, sigma_from_violation_probability,
                               uncertainty_cost, uncertainty_cost_tf)
from tstop.util import psd_factor


def _lin(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return Linearization(A=A, B=B, G=np.eye(A.shape[0]))


def test_propagate_scalar_formula():
    out = propagate_covariance(_lin([[1.0]], [[1.0]]), np.array([[-0.5]]),
                               np.array([[1.0]]), np.array([[0.01]]))
    assert out[0, 0] == pytest.approx(0.26)


def test_propagate_zero_initial():
    Sw = np.diag([1e-6, 1e-6, 3.0625e-6])
    out = propagate_covariance(_lin(np.eye(3), np.zeros((3, 2))),
                               np.zeros((2, 3)), np.zeros((3, 3)), Sw)
    np.testing.assert_allclose(out, Sw)


def test_propagate_monte_carlo_oracle():
    rng = np.random.default_rng(42)
    A = np.array([[0.9, 0.1, 0.0], [0.0, 0.8, 0.2], [0.1, 0.0, 0.7]])
    B = rng.normal(size=(3, 2)) * 0.3
    K = rng.normal(size=(2, 3)) * 0.2
    C = A + B @ K
    assert np.max(np.abs(np.linalg.eigvals(C))) < 1.0
    Sw = np.diag([0.02, 0.01, 0.03])
    N = 8
    sig = propagate_sequence(np.tile(A, (N, 1, 1)), np.tile(B, (N, 1, 1)),
                             np.tile(K, (N, 1, 1)), np.zeros((3, 3)), Sw)
    M = 1_000_000
    L = psd_factor(Sw)
    x = np.zeros((M, 3))
    for _ in range(N):
        x = x @ C.T + rng.standard_normal((M, 3)) @ L.T
    emp = np.cov(x.T)
    err = np.linalg.norm(emp - sig[N], "fro") / np.linalg.norm(sig[N], "fro")
    assert err < 0.02


def test_propagate_preserves_psd_and_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n = int(rng.integers(1, 4))
        W = rng.normal(size=(n, n))
        Sigma = W @ W.T
        A = rng.normal(size=(n, n))
        B = rng.normal(size=(n, 2))
        K = rng.normal(size=(2, n))
        Sw = np.zeros((n, n))
        out = propagate_covariance(_lin(A, B), K, Sigma, Sw)
        assert np.array_equal(out, out.T)
        assert np.linalg.eigvalsh(out).min() > -1e-10


def test_propagate_loewner_monotone():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = 3
        W = rng.normal(size=(n, n))
        Sa = W @ W.T
        V = rng.normal(size=(n, n))
        Sb = Sa + V @ V.T  # Sb >= Sa
        A = rng.normal(size=(n, n))
        B = rng.normal(size=(n, 2))
        K = rng.normal(size=(2, n))
        Sw = np.eye(n) * 0.1
        Pa = propagate_covariance(_lin(A, B), K, Sa, Sw)
        Pb = propagate_covariance(_lin(A, B), K, Sb, Sw)
        for _ in range(5):
            v = rng.normal(size=n)
            assert v @ Pa @ v <= v @ Pb @ v + 1e-12


def test_open_loop_closed_form_sum():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(3, 3)) * 0.5
    Sw = np.diag([0.1, 0.2, 0.3])
    S0 = np.eye(3) * 0.4
    N = 6
    sig = propagate_sequence(np.tile(A, (N, 1, 1)), np.zeros((N, 3, 1)),
                             np.zeros((N, 1, 3)), S0, Sw)
    An = np.linalg.matrix_power(A, N)
    expected = An @ S0 @ An.T
    for k in range(N):
        Ak = np.linalg.matrix_power(A, k)
        expected += Ak @ Sw @ Ak.T
    np.testing.assert_allclose(sig[N], expected, atol=1e-12)


def test_covariance_sequence_validation():
    good = np.tile(np.eye(2), (3, 1, 1))
    CovarianceSequence(sigmas=good)
    bad = good.copy()
    bad[1, 0, 1] = 0.5  # asymmetric
    with pytest.raises(ValueError):
        CovarianceSequence(sigmas=bad)
    neg = np.tile(-np.eye(2), (3, 1, 1))
    with pytest.raises(ValueError):
        CovarianceSequence(sigmas=neg)


def test_constraint_variance_stage_cases():
    K0 = np.zeros((2, 3))
    g_ctrl = np.array([0, 0, 0, 1, 0.0])
    assert constraint_variance_stage(g_ctrl, K0, np.eye(3)) == 0.0
    K = np.zeros((2, 3))
    K[0] = [1, 0, 0]
    assert constraint_variance_stage(g_ctrl, K, np.eye(3)) == pytest.approx(1.0)


def test_constraint_variance_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = rng.normal(size=5)
        K = rng.normal(size=(2, 3))
        W = rng.normal(size=(3, 3))
        Sigma = W @ W.T
        M = np.vstack([np.eye(3), K])
        expected = g @ M @ Sigma @ M.T @ g
        assert constraint_variance_stage(g, K, Sigma) == pytest.approx(expected)
        gt = rng.normal(size=3)
        assert constraint_variance_terminal(gt, Sigma) == pytest.approx(gt @ Sigma @ gt)


def test_variance_terminal_cases():
    assert constraint_variance_terminal(np.array([1, 0, 0.0]),
                                        np.diag([4.0, 1, 1])) == pytest.approx(4.0)
    assert constraint_variance_terminal(np.array([1, 2, 3.0]), np.zeros((3, 3))) == 0.0


def test_stage_equals_terminal_when_control_grad_zero():
    rng = np.random.default_rng(4)
    g_s = rng.normal(size=3)
    grad = np.concatenate([g_s, np.zeros(2)])
    W = rng.normal(size=(3, 3))
    Sigma = W @ W.T
    K = rng.normal(size=(2, 3))
    assert constraint_variance_stage(grad, K, Sigma) == pytest.approx(
        constraint_variance_terminal(g_s, Sigma))


def test_safety_margin_values():
    assert safety_margin(0.25, 3.0, 0.0) == pytest.approx(1.5)
    assert safety_margin(0.0, 3.0, 1e-8) == pytest.approx(3e-4)
    b = np.linspace(0, 1, 5)
    m = safety_margin(b, 3.0, 1e-8)
    assert np.all(np.diff(m) > 0)
    with pytest.raises(ValueError):
        safety_margin(-1e-9, 3.0, 1e-8)


def test_mu_to_eta_values():
    assert mu_to_eta(1.0, 0.25, 3.0, 0.0) == pytest.approx(3.0)
    assert mu_to_eta(0.0, 0.7, 3.0, 1e-8) == 0.0


def test_mu_to_eta_stationarity():
    # eta equals d/dbeta of mu * sigma * sqrt(beta + eps)
    mu, beta, sig, eps = 0.8, 0.3, 3.0, 1e-8
    h = 1e-7
    fd = (mu * sig * np.sqrt(beta + h + eps) - mu * sig * np.sqrt(beta - h + eps)) / (2 * h)
    assert mu_to_eta(mu, beta, sig, eps) == pytest.approx(fd, rel=1e-6)


def test_uncertainty_cost_cases():
    assert uncertainty_cost(np.eye(3), np.zeros((2, 3)), np.eye(5)) == pytest.approx(3.0)
    assert uncertainty_cost(np.zeros((3, 3)), np.ones((2, 3)), np.eye(5)) == 0.0
    rng = np.random.default_rng(5)
    W = rng.normal(size=(3, 3))
    Sigma = W @ W.T
    K = rng.normal(size=(2, 3))
    R = rng.normal(size=(5, 5))
    R = R @ R.T
    M = np.vstack([np.eye(3), K])
    assert uncertainty_cost(Sigma, K, R) == pytest.approx(np.trace(R @ M @ Sigma @ M.T))
    R_tf = rng.normal(size=(3, 3))
    R_tf = R_tf @ R_tf.T
    assert uncertainty_cost_tf(Sigma, R_tf) == pytest.approx(np.trace(R_tf @ Sigma))


def test_sigma_from_violation_probability():
    assert sigma_from_violation_probability(0.00135) == pytest.approx(3.0, abs=1e-3)
    assert sigma_from_violation_probability(0.158655) == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(ValueError):
        sigma_from_violation_probability(0.5)
    with pytest.raises(ValueError):
        sigma_from_violation_probability(0.0)


def test_safety_margin_set_consistency():
    ms = SafetyMarginSet.from_betas(np.full((4, 5), 0.1), np.full((3, 5), 0.2),
                                    np.full(2, 0.3), sigma=3.0, eps=1e-8)
    ms.validate()
    np.testing.assert_allclose(ms.stage1, 3.0 * np.sqrt(0.1 + 1e-8))
    ms.stage1[0, 0] *= 2
    with pytest.raises(ValueError):
        ms.validate()
