import numpy as np
import pytest

from spcontrol import ProblemCoefficients, TreeStepper, build_grid, build_tree
from spcontrol.control import (HumConfig, dual_functional, hum_backward,
                               hum_backward_collapsed, hum_forward, k_cost_exponent,
                               m_cost_exponent)


def test_k_exponent_paper_substitutions():
    assert k_cost_exponent(1.0, 0.0, 0.0, 0.0, 0.0) == pytest.approx(2.0, rel=1e-15)
    assert k_cost_exponent(1.0, 1.0, 0.0, 0.0, 0.0) == pytest.approx(4.0, rel=1e-15)
    assert k_cost_exponent(0.5, 0.0, 2.0, 0.0, 0.0) == pytest.approx(5.0 + 2.0 ** (2.0 / 3.0), rel=1e-15)


def test_m_exponent_paper_substitutions():
    assert m_cost_exponent(1.0, 0.0, 0.0, 0.0) == pytest.approx(2.0, rel=1e-15)
    assert m_cost_exponent(1.0, 0.0, 0.0, 1.0) == pytest.approx(4.0, rel=1e-15)
    assert m_cost_exponent(2.0, 0.0, 1.0, 0.0) == pytest.approx(4.5, rel=1e-15)


def test_hum_config_validation():
    with pytest.raises(ValueError):
        HumConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        HumConfig(epsilon=1e-3, cg_tol=2.0)


@pytest.fixture(scope="module")
def hum_setup():
    grid = build_grid(1.0, 16, (0.2, 0.85), (0.35, 0.7))
    tree = build_tree(6, 1.0)
    coeffs = ProblemCoefficients(a=0.2, a1=0.8, a2=0.4, b1=0.3, b2=0.3, b=0.4)
    return grid, tree, coeffs, TreeStepper(grid, tree, coeffs)


def test_dual_functional_zero_data(hum_setup):
    grid, tree, coeffs, st = hum_setup
    y0 = np.sin(np.pi * grid.x)
    zT = np.zeros((tree.n_nodes(tree.M), grid.N))
    out = dual_functional(grid, tree, coeffs, y0, 1e-2, zT, stepper=st)
    assert out["value"] == 0.0
    b = st.forward(y0).y[tree.M]
    assert np.allclose(out["gradient"], b, rtol=1e-14)


def test_dual_functional_positive_quadratic(hum_setup):
    grid, tree, coeffs, st = hum_setup
    rng = np.random.default_rng(0)
    eps = 1e-2
    leaf_w = tree.node_weight(tree.M) * grid.h
    for _ in range(5):
        zT = rng.standard_normal((tree.n_nodes(tree.M), grid.N))
        out = dual_functional(grid, tree, coeffs, np.zeros(grid.N), eps, zT, stepper=st)
        assert out["value"] >= 0.5 * eps * leaf_w * np.sum(zT * zT)


def test_dual_gradient_matches_central_differences(hum_setup):
    grid, tree, coeffs, st = hum_setup
    rng = np.random.default_rng(1)
    y0 = rng.standard_normal(grid.N)
    zT = rng.standard_normal((tree.n_nodes(tree.M), grid.N))
    eps, step = 1e-2, 1e-5
    leaf_w = tree.node_weight(tree.M) * grid.h
    out = dual_functional(grid, tree, coeffs, y0, eps, zT, stepper=st)
    for _ in range(10):
        d = rng.standard_normal(zT.shape)
        vp = dual_functional(grid, tree, coeffs, y0, eps, zT + step * d, stepper=st)["value"]
        vm = dual_functional(grid, tree, coeffs, y0, eps, zT - step * d, stepper=st)["value"]
        fd = (vp - vm) / (2.0 * step)
        directional = leaf_w * float(np.sum(out["gradient"] * d))
        assert abs(fd - directional) <= 1e-6 * max(abs(directional), 1.0)


def test_hum_forward_zero_initial_state(hum_setup):
    grid, tree, coeffs, st = hum_setup
    res = hum_forward(grid, tree, coeffs, np.zeros(grid.N),
                      HumConfig(epsilon=1e-2), stepper=st)
    assert res.report.cg_iterations == 0
    assert res.report.terminal_norm == 0.0
    assert all(np.all(res.u[n] == 0.0) for n in range(tree.M))
    assert all(np.all(res.v[n] == 0.0) for n in range(tree.M))


def test_hum_forward_optimality_identity(hum_setup):
    grid, tree, coeffs, st = hum_setup
    res = hum_forward(grid, tree, coeffs, np.sin(np.pi * grid.x),
                      HumConfig(epsilon=1e-3, cg_tol=1e-11, cg_max_iter=4000), stepper=st)
    assert res.report.cg_converged
    assert res.report.identity_residual <= 1e-8
    # controlled terminal state equals -eps * adjoint data at the optimum
    assert np.allclose(res.y.y[tree.M], -res.report.epsilon * res.adjoint_data,
                       atol=1e-10 * np.abs(res.adjoint_data).max())
    assert res.report.bound_ratio > 0.0 and np.isfinite(res.report.bound_ratio)


def test_hum_forward_scaling_equivariance(hum_setup):
    grid, tree, coeffs, st = hum_setup
    cfg = HumConfig(epsilon=1e-2, cg_tol=1e-12, cg_max_iter=3000)
    y0 = np.sin(np.pi * grid.x)
    r1 = hum_forward(grid, tree, coeffs, y0, cfg, stepper=st)
    r2 = hum_forward(grid, tree, coeffs, 2.0 * y0, cfg, stepper=st)
    assert r2.report.control_cost == pytest.approx(4.0 * r1.report.control_cost, rel=1e-9)
    for n in range(tree.M):
        assert np.allclose(r2.u[n], 2.0 * r1.u[n], rtol=1e-8, atol=1e-14)


def test_hum_forward_eps_sweep_decreases(hum_setup):
    grid, tree, coeffs, st = hum_setup
    y0 = np.sin(np.pi * grid.x)
    norms = []
    prev = None
    for eps in (1e-1, 1e-2, 1e-3):
        res = hum_forward(grid, tree, coeffs, y0,
                          HumConfig(epsilon=eps, cg_tol=1e-10, cg_max_iter=3000),
                          stepper=st, p_start=prev)
        prev = res.adjoint_data
        norms.append(res.report.terminal_norm)
    assert norms[0] > norms[1] > norms[2]


def test_cg_functional_trace_monotone(hum_setup):
    grid, tree, coeffs, st = hum_setup
    res = hum_forward(grid, tree, coeffs, np.sin(np.pi * grid.x),
                      HumConfig(epsilon=1e-3, cg_tol=1e-10, cg_max_iter=3000), stepper=st)
    vals = res.cg_trace["values"]
    assert len(vals) > 2
    assert all(a >= b - 1e-12 * abs(a) for a, b in zip(vals, vals[1:]))


def test_hum_forward_reports_nonconvergence(hum_setup):
    grid, tree, coeffs, st = hum_setup
    res = hum_forward(grid, tree, coeffs, np.sin(np.pi * grid.x),
                      HumConfig(epsilon=1e-4, cg_tol=1e-12, cg_max_iter=3), stepper=st)
    assert not res.report.cg_converged
    assert res.report.cg_iterations == 3
    assert res.report.cg_residual > 1e-12


def test_cost_monotone_as_horizon_shrinks(hum_setup):
    grid, _, coeffs, _ = hum_setup
    y0 = np.sin(np.pi * grid.x)
    costs = []
    for T in (1.0, 0.5, 0.25):
        tree = build_tree(6, T)
        res = hum_forward(grid, tree, coeffs, y0,
                          HumConfig(epsilon=1e-3, cg_tol=1e-10, cg_max_iter=4000))
        costs.append(res.report.control_cost)
    assert costs[0] < costs[1] < costs[2]


def test_hum_backward_zero_terminal(hum_setup):
    grid, tree, coeffs, st = hum_setup
    yT = np.zeros((tree.n_nodes(tree.M), grid.N))
    res = hum_backward(grid, tree, coeffs, yT, HumConfig(epsilon=1e-2), stepper=st)
    assert res.report.cg_iterations == 0
    assert all(np.all(res.u[n] == 0.0) for n in range(tree.M))


def test_hum_backward_drives_initial_state_down(hum_setup):
    grid, tree, coeffs, st = hum_setup
    yT = np.tile(np.sin(np.pi * grid.x), (tree.n_nodes(tree.M), 1))
    norms = []
    for eps in (1e-1, 1e-2, 1e-3):
        res = hum_backward(grid, tree, coeffs, yT,
                           HumConfig(epsilon=eps, cg_tol=1e-11, cg_max_iter=2000), stepper=st)
        norms.append(res.report.terminal_norm)
        assert res.report.identity_residual <= 1e-8
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] <= 1e-2 * res.report.uncontrolled_norm


def test_hum_backward_deterministic_degeneration():
    grid = build_grid(1.0, 24, (0.2, 0.85), (0.35, 0.7))
    tree = build_tree(6, 1.0)
    coeffs = ProblemCoefficients(a=0.2, a1=0.8, a2=0.0, b=0.4)
    cfg = HumConfig(epsilon=1e-3, cg_tol=1e-12, cg_max_iter=1000)
    yT_vec = np.sin(np.pi * grid.x)
    res_tree = hum_backward(grid, tree, coeffs,
                            np.tile(yT_vec, (tree.n_nodes(tree.M), 1)), cfg)
    res_path = hum_backward_collapsed(grid, tree.M, tree.T, coeffs, yT_vec, cfg)
    scale = np.abs(res_path.adjoint_data).max()
    assert np.abs(res_tree.adjoint_data - res_path.adjoint_data).max() <= 1e-12 * scale
    assert res_tree.report.terminal_norm == pytest.approx(res_path.report.terminal_norm,
                                                          rel=1e-12)
