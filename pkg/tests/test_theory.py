import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgq import theory as T
from cgq.mdp import GridWorldSpec, build_gridworld


def scalar(a=0.9, b=1.0, gamma=0.9):
    return T.LinearOperatorSpec([[a]], [b], gamma)


def test_scalar_contraction():
    op = T.make_contraction(1, 0.9, seed=3)
    a = op.A[0, 0]
    assert abs(a) <= 0.9
    assert T.exact_fixed_point(op)[0] == pytest.approx(op.b[0] / (1 - a))


@pytest.mark.parametrize("spectrum", ["uniform", "flat"])
@pytest.mark.parametrize("seed", range(5))
def test_spectral_norm_below_gamma(seed, spectrum):
    op = T.make_contraction(30, 0.9, seed, spectrum)
    norm = T.spectral_norm(op.A)
    assert norm <= 0.9 + 1e-10
    assert norm == pytest.approx(np.linalg.svd(op.A, compute_uv=False)[0], rel=1e-8)
    if spectrum == "flat":
        np.testing.assert_allclose(np.linalg.svd(op.A, compute_uv=False), 0.9, atol=1e-12)


def test_make_contraction_deterministic():
    a, b = T.make_contraction(10, 0.9, 42), T.make_contraction(10, 0.9, 42)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b)
    assert not np.array_equal(a.A, T.make_contraction(10, 0.9, 43).A)


def test_operator_norm_rejected():
    with pytest.raises(T.OperatorError, match="exceeds"):
        T.LinearOperatorSpec(np.eye(2) * 0.95, np.zeros(2), 0.9)
    with pytest.raises(T.OperatorError):
        T.make_contraction(3, 0.9, 0, spectrum="lumpy")


def test_contraction_from_mdp():
    # deterministic gridworld under a fixed policy: P_pi is a 0/1 matrix whose L2 norm exceeds 1
    mdp = build_gridworld(GridWorldSpec(width=3, height=1, goal=(2, 0)))
    right = np.zeros((3, 4))
    right[:, 3] = 1.0
    with pytest.raises(T.OperatorError, match="L2 norm"):
        T.contraction_from_mdp(mdp, right)
    # a doubly stochastic random walk contracts
    P = np.full((4, 1, 4), 0.25)
    from cgq.mdp import TabularMDP

    walk = TabularMDP(P, np.ones((4, 1)), np.zeros(4, dtype=bool), 0.9, np.full(4, 0.25))
    op = T.contraction_from_mdp(walk, np.ones((4, 1)))
    np.testing.assert_allclose(T.exact_fixed_point(op), 10.0)


def test_fixed_point_examples():
    op = T.make_contraction(20, 0.9, 0)
    q_star = T.exact_fixed_point(op)
    q_c = np.random.default_rng(0).normal(size=20)
    assert np.array_equal(T.exact_fixed_point(T.RegularizedOperatorSpec(op, q_c, 0.0)), q_star)
    far = T.exact_fixed_point(T.RegularizedOperatorSpec(op, q_c, 1e9))
    assert np.max(np.abs(far - q_c)) <= 1e-6 * np.max(np.abs(q_c))
    reg = T.RegularizedOperatorSpec(scalar(), [5.0], 1.0)
    assert T.exact_fixed_point(reg)[0] == pytest.approx(6 / 1.1, rel=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 100.0))
def test_fixed_point_is_invariant(seed, beta):
    op = T.make_contraction(8, 0.95, seed)
    reg = T.RegularizedOperatorSpec(op, np.random.default_rng(seed).normal(size=8), beta)
    q = T.exact_fixed_point(reg)
    np.testing.assert_allclose(reg.apply(q), q, atol=1e-10)


def test_noiseless_simulation_decays():
    op = T.make_contraction(10, 0.9, 1)
    res = T.simulate_noisy_iteration(op, 0.0, 300, n_seeds=3)
    curve = res.mse_curve
    assert res.asymptotic_mse <= 1e-12
    ratios = curve[1:60] / curve[:59]
    assert np.all(ratios <= 0.81 + 1e-12)


def test_simulation_deterministic():
    op = T.make_contraction(5, 0.9, 2)
    a = T.simulate_noisy_iteration(op, 0.05, 50, n_seeds=4, master_seed=9)
    b = T.simulate_noisy_iteration(op, 0.05, 50, n_seeds=4, master_seed=9)
    assert np.array_equal(a.mse_curve, b.mse_curve)
    c = T.simulate_noisy_iteration(op, 0.05, 50, n_seeds=4, master_seed=9, block=7)
    assert np.array_equal(a.mse_curve, c.mse_curve)


def test_simulation_below_theorem1_bound():
    op = T.make_contraction(50, 0.9, 0)
    res = T.simulate_noisy_iteration(op, 0.05, 400, n_seeds=100)
    assert res.asymptotic_mse <= 0.0025 / 0.19 + 3 * res.stderr


def test_flat_spectrum_attains_theorem1_bound():
    # with every singular value equal to gamma the stationary variance is sigma^2 / (1 - gamma^2) exactly
    op = T.make_contraction(50, 0.9, 0, "flat")
    res = T.simulate_noisy_iteration(op, 0.05, 600, n_seeds=100)
    assert abs(res.asymptotic_mse - 0.0025 / 0.19) <= 3 * res.stderr


def test_large_beta_mse_is_bias():
    op = T.make_contraction(20, 0.9, 4)
    q_c = T.exact_fixed_point(op) + 0.3
    reg = T.RegularizedOperatorSpec(op, q_c, 200.0)
    res = T.simulate_noisy_iteration(reg, 0.05, 200, n_seeds=50)
    bias_sq = T.ms_norm(T.exact_fixed_point(reg) - T.exact_fixed_point(op)) ** 2
    variance = 0.0025 / (201.0**2 - 0.81)
    assert res.asymptotic_mse == pytest.approx(bias_sq + variance, abs=3 * res.stderr + 1e-12)
    assert variance < 1e-3 * bias_sq


def test_bound_formulas():
    assert T.theorem1_bound(0.05, 0.9) == pytest.approx(0.0025 / 0.19, rel=1e-15)
    assert T.theorem1_bound(0.05, 0.9) == pytest.approx(0.0131579, abs=5e-8)
    for sigma in (0.0, 0.05, 1.0):
        for gamma in (0.1, 0.9, 0.99):
            assert T.theorem2_bound(sigma, gamma, 0.0, 0.7) == T.theorem1_bound(sigma, gamma)
    assert T.theorem2_bound(0.05, 0.9, math.inf, 0.3) == pytest.approx(0.09)
    assert T.theorem2_bound(0.05, 0.9, 1e9, 0.3) == pytest.approx(0.09, rel=1e-6)
    # hand evaluation at beta=1: 0.0025/(4-0.81) + 0.09/(1.1^2)
    assert T.theorem2_bound(0.05, 0.9, 1.0, 0.3) == pytest.approx(0.0025 / 3.19 + 0.09 / 1.21, rel=1e-14)
    assert T.theorem2_bound(0.05, 0.9, 1.0, 0.3, L=1.0) > T.theorem2_bound(0.05, 0.9, 1.0, 0.3)
    with pytest.raises(ValueError):
        T.theorem2_bound(0.05, 0.9, -1.0, 0.3)


def test_bias_check_examples():
    op = T.make_contraction(15, 0.9, 5)
    q_c = np.random.default_rng(1).normal(size=15)
    assert T.bias_bound_check(op, q_c, 0.0) == (0.0, 0.0, True)
    lhs, rhs, ok = T.bias_bound_check(op, T.exact_fixed_point(op), 3.0)
    assert lhs <= 1e-12 and rhs <= 1e-12 and ok


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.sampled_from(["uniform", "flat"]))
def test_bias_bound_property(seed, beta, spectrum):
    op = T.make_contraction(12, 0.9, seed, spectrum)
    q_c = np.random.default_rng(seed).normal(size=12) * 3
    assert T.bias_bound_check(op, q_c, beta)[2]


def test_contraction_check_examples():
    op = T.make_contraction(20, 0.9, 6)
    q_c = np.zeros(20)
    assert T.contraction_factor_check(T.RegularizedOperatorSpec(op, q_c, 0.0), 200) <= 0.9
    assert T.contraction_factor_check(T.RegularizedOperatorSpec(op, q_c, 9.0), 200) <= 0.09 * (1 + 1e-10)
    exact = T.RegularizedOperatorSpec(scalar(a=0.9), [2.0], 4.0)
    assert T.contraction_factor_check(exact, 50) == pytest.approx(0.9 / 5.0, rel=1e-12)


def _report(op, q_c, sigma, grid, **kw):
    return T.beta_sweep(op, q_c, sigma, grid, k_max=kw.pop("k_max", 400), n_seeds=kw.pop("n_seeds", 30), **kw)


def test_sweep_noiseless_is_pure_bias():
    op = T.make_contraction(20, 0.9, 7)
    q_c = T.exact_fixed_point(op) + np.random.default_rng(2).normal(size=20) * 0.1
    rep = _report(op, q_c, 0.0, [0, 0.5, 1, 4, 1e6], n_seeds=2)
    assert np.all(np.diff(rep.empirical_mse) > 0)
    assert rep.argmin_beta == 0


def test_sweep_toward_truth_is_pure_variance_reduction():
    op = T.make_contraction(20, 0.9, 8)
    rep = _report(op, T.exact_fixed_point(op), 0.05, [0, 0.5, 1, 4, 1e6])
    assert np.all(np.diff(rep.empirical_mse) < 0)
    assert rep.argmin_beta == 1e6


def test_sweep_interior_optimum_at_high_gamma():
    op = T.make_contraction(50, 0.99, 0, "flat")
    q_star = T.exact_fixed_point(op)
    d = np.random.default_rng([0, 7]).standard_normal(50)
    q_c = q_star + math.sqrt(0.05) * d / T.ms_norm(d)
    grid = [0, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1, 1e6]
    rep = T.beta_sweep(op, q_c, 0.05, grid, k_max=3000, n_seeds=100)
    assert rep.interior_optimum(3.0)
    assert rep.bound_satisfied(3.0)
    assert rep.dist_sq == pytest.approx(0.05)
    assert np.all(rep.exact_bias_sq <= rep.bias_bound * (1 + 1e-9))


def test_bound_report_csv():
    op = T.make_contraction(5, 0.9, 9)
    rep = _report(op, np.zeros(5), 0.05, [0, 1], k_max=40, n_seeds=3)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "beta,empirical_mse,stderr,theoretical_bound,bias_bound"
    assert len(lines) == 3
    assert [float(x) for x in lines[2].split(",")][0] == 1.0
