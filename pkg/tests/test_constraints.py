import numpy as np
import pytest

from tstop.constraints import (ControlBounds, EllipsoidObstacle, ellipsoid_violation,
                               unicycle_constraint_set)

PAPER_OBS = EllipsoidObstacle(x=1.25, y=0.5, a=1.0, b=0.5, theta=np.pi / 6)
BOUNDS = ControlBounds(v_min=0.0, v_max=0.5, omega_min=-np.pi / 4, omega_max=np.pi / 4)


def _scenario_cs(terminal_halfwidth=1e-3):
    return unicycle_constraint_set(BOUNDS, [PAPER_OBS], np.array([2.5, 1.0, 0.0]),
                                   terminal_halfwidth)


def test_ellipsoid_center_value():
    assert ellipsoid_violation(np.array([1.25, 0.5, 0.7]), PAPER_OBS) == pytest.approx(1.0)


def test_ellipsoid_boundary_major_axis():
    s = np.array([1.25 + PAPER_OBS.a * np.cos(PAPER_OBS.theta),
                  0.5 + PAPER_OBS.a * np.sin(PAPER_OBS.theta), 0.0])
    assert abs(ellipsoid_violation(s, PAPER_OBS)) < 1e-12


def test_ellipsoid_outside_matches_dense_arithmetic():
    s = np.array([0.1, 0.5, 0.0])
    p = s[:2] - np.array([PAPER_OBS.x, PAPER_OBS.y])
    c, sn = np.cos(PAPER_OBS.theta), np.sin(PAPER_OBS.theta)
    R = np.array([[c, sn], [-sn, c]])
    Om = R.T @ np.diag([1 / PAPER_OBS.a**2, 1 / PAPER_OBS.b**2]) @ R
    expected = 1.0 - p @ Om @ p
    val = ellipsoid_violation(s, PAPER_OBS)
    assert val == pytest.approx(expected, abs=1e-14)
    assert val < 0


def test_ellipsoid_rotation_pi_symmetry():
    obs2 = EllipsoidObstacle(PAPER_OBS.x, PAPER_OBS.y, PAPER_OBS.a, PAPER_OBS.b,
                             PAPER_OBS.theta + np.pi)
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3))
    np.testing.assert_allclose(ellipsoid_violation(pts, PAPER_OBS),
                               ellipsoid_violation(pts, obs2), atol=1e-12)


def test_stage_order_and_table_values():
    cs = _scenario_cs()
    s = np.array([0.1, 0.5, 0.0])
    v, jac = cs.eval_stage(s, np.array([0.5, 0.0]))
    assert v.shape == (5,)
    assert v[0] == pytest.approx(0.0)        # v - v_max
    v2, _ = cs.eval_stage(s, np.array([0.25, np.pi / 4]))
    assert v2[2] == pytest.approx(0.0)       # omega - omega_max
    assert v2[3] == pytest.approx(-np.pi / 2)  # omega_min - omega


def test_stage_box_jacobians_are_unit_rows():
    cs = _scenario_cs()
    _, jac = cs.eval_stage(np.array([0.3, 0.2, 0.1]), np.array([0.2, 0.1]))
    np.testing.assert_allclose(jac[0], [0, 0, 0, 1, 0])
    np.testing.assert_allclose(jac[1], [0, 0, 0, -1, 0])
    np.testing.assert_allclose(jac[2], [0, 0, 0, 0, 1])
    np.testing.assert_allclose(jac[3], [0, 0, 0, 0, -1])


def test_stage_gradients_match_finite_differences():
    cs = _scenario_cs()
    rng = np.random.default_rng(1)
    for _ in range(5):
        s = rng.normal(size=3)
        u = rng.normal(size=2)
        v0, jac = cs.eval_stage(s, u)
        fd = np.zeros_like(jac)
        x = np.concatenate([s, u])
        for j in range(5):
            h = 1e-6 * (1 + abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            vp, _ = cs.eval_stage(xp[:3], xp[3:])
            vm, _ = cs.eval_stage(xm[:3], xm[3:])
            fd[:, j] = (vp - vm) / (2 * h)
        assert np.max(np.abs(fd - jac)) <= 1e-6 * (1 + np.max(np.abs(jac)))


def test_terminal_box():
    cs = _scenario_cs(terminal_halfwidth=1e-3)
    s_tf = np.array([2.5, 1.0, 0.0])
    v, jac = cs.eval_terminal(s_tf)
    assert v.shape == (6,)
    np.testing.assert_allclose(v, -1e-3, atol=1e-15)
    v2, _ = cs.eval_terminal(s_tf + np.array([1e-3, 0, 0]))
    assert v2[0] == pytest.approx(0.0, abs=1e-15)
    # gradients are +/- unit vectors
    for row in jac:
        assert np.sum(np.abs(row)) == pytest.approx(1.0)


def test_terminal_disabled():
    cs = _scenario_cs(terminal_halfwidth=None)
    assert cs.n_h_tf == 0
    v, jac = cs.eval_terminal(np.zeros(3))
    assert v.shape == (0,)
    assert jac.shape == (0, 3)


def test_constraint_ordering_stable():
    cs = _scenario_cs()
    names = [c.name for c in cs.stage]
    assert names == ["v_max", "v_min", "omega_max", "omega_min", "obstacle_0"]


def test_obstacle_hessian_constant():
    cs = _scenario_cs()
    H = cs.stage_hessians(np.array([0.3, 0.2, 0.1]), np.array([0.2, 0.1]))
    assert H.shape == (5, 5, 5)
    np.testing.assert_allclose(H[:4], 0.0)
    np.testing.assert_allclose(H[4, :2, :2], -2 * PAPER_OBS.shape_matrix())


def test_bad_ellipse_axes():
    with pytest.raises(ValueError):
        EllipsoidObstacle(0, 0, a=0.0, b=1.0)
