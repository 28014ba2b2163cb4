import numpy as np
import pytest

from ttcvar.cross import CrossConfig
from ttcvar.quadrature import gauss_legendre, TensorGrid, uniform_grid
from ttcvar.smoothing import (
    SmoothingParams,
    exact_cvar_discrete,
    exact_cvar_sorted,
    g_eps,
    g_eps_prime,
    g_eps_second,
    smoothed_cvar,
)
from ttcvar.ttcore import TtVector, tt_ones, tt_scale


def test_value_at_zero():
    for eps in [1e-3, 0.1, 5.0]:
        assert g_eps(0.0, eps) == pytest.approx(eps * np.log(2.0), rel=1e-14)
        assert g_eps_prime(0.0, eps) == pytest.approx(0.5, abs=1e-14)
        assert g_eps_second(0.0, eps) == pytest.approx(1.0 / (4.0 * eps), rel=1e-14)


def test_asymptotic_linearity_without_overflow():
    eps = 1e-3
    x = 1e6
    assert g_eps(x, eps) - x <= eps * 1e-20
    assert g_eps(50 * eps, eps) - 50 * eps <= eps * 1e-20
    assert g_eps(-1e6, eps) == 0.0
    assert g_eps_prime(1e9, eps) == 1.0
    assert g_eps_second(1e9, eps) == 0.0


def test_upper_bound_on_plus_function():
    eps = 0.37
    x = np.linspace(-50 * eps, 50 * eps, 2001)
    gap = g_eps(x, eps) - np.maximum(x, 0.0)
    assert np.all(gap >= 0.0)
    assert np.all(gap <= eps * np.log(2.0) + 1e-15)


def test_prime_strictly_increasing_and_second_symmetric():
    eps = 0.2
    # strictly increasing wherever the sigmoid is resolvable in float64
    x = np.linspace(-30 * eps, 30 * eps, 501)
    assert np.all(np.diff(g_eps_prime(x, eps)) > 0)
    x = np.linspace(-10, 10, 501)
    assert np.all(np.diff(g_eps_prime(x, eps)) >= 0)
    assert np.allclose(g_eps_second(x, eps), g_eps_second(-x, eps), atol=1e-15)
    assert np.all(g_eps_second(x, eps) >= 0)
    assert np.argmax(g_eps_second(x, eps)) == 250  # peak at x = 0


def test_second_integrates_to_one():
    eps = 0.05
    x = np.linspace(-40 * eps, 40 * eps, 400001)
    val = np.trapezoid(g_eps_second(x, eps), x)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_finite_difference_consistency():
    rng = np.random.default_rng(0)
    for eps in [1e-3, 1e-1, 2.0]:
        for x in rng.uniform(-5, 5, size=12):
            h = 1e-6 * max(1.0, abs(x))
            fd = (g_eps(x + h, eps) - g_eps(x - h, eps)) / (2 * h)
            assert fd == pytest.approx(g_eps_prime(x, eps), abs=1e-6)
            fd2 = (g_eps_prime(x + h, eps) - g_eps_prime(x - h, eps)) / (2 * h)
            assert fd2 == pytest.approx(g_eps_second(x, eps), abs=1e-5 / eps)


# ---------------------------------------------------------------------------
# sorted-sample CVaR oracle


def test_sorted_degenerate_distribution():
    var, cvar = exact_cvar_sorted([1.0, 1.0, 1.0], beta=0.5)
    assert (var, cvar) == (1.0, 1.0)


def test_sorted_uniform_1_to_100():
    var, cvar = exact_cvar_sorted(np.arange(1.0, 101.0), beta=0.5)
    assert var == 50.0
    assert cvar == pytest.approx(75.5)  # mean of the top half


def test_sorted_small_beta_tends_to_mean():
    x = np.arange(1.0, 101.0)
    _, cvar = exact_cvar_sorted(x, beta=1e-9)
    assert cvar == pytest.approx(x.mean(), rel=1e-6)


def test_sorted_too_few_samples():
    with pytest.raises(ValueError):
        exact_cvar_sorted([1.0, 2.0], beta=0.9)


def test_discrete_law_oracle_matches_sorted_on_uniform_weights():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(400)
    v1, c1 = exact_cvar_sorted(x, 0.8)
    v2, c2 = exact_cvar_discrete(x, np.full(400, 1 / 400), 0.8)
    assert v1 == pytest.approx(v2)
    assert c1 == pytest.approx(c2)


# ---------------------------------------------------------------------------
# smoothed CVaR over TT surrogates


def test_smoothed_cvar_constant_surrogate():
    grid = uniform_grid(3, 3)
    c, t = 2.0, 1.25
    params = SmoothingParams(epsilon=0.3, beta=0.5)
    values = tt_scale(tt_ones(grid.shape), c)
    got = smoothed_cvar(values, t, params, grid)
    want = t + params.tail_weight * g_eps(c - t, params.epsilon)
    assert got == pytest.approx(want, rel=1e-10)
    # with t = c the result is c + eps*ln2/(1-beta)
    got2 = smoothed_cvar(values, c, params, grid)
    assert got2 == pytest.approx(c + params.tail_weight * params.epsilon * np.log(2), rel=1e-10)


def test_smoothed_cvar_d1_against_sorting_oracle():
    # the uniform law on (-sqrt3, sqrt3) discretized by a dense Gauss rule
    n = 401
    rule = gauss_legendre(n, -np.sqrt(3.0), np.sqrt(3.0))
    grid = TensorGrid((rule,))
    values = TtVector([rule.nodes.reshape(1, n, 1)])
    beta = 0.5
    var, cvar_exact = exact_cvar_discrete(rule.nodes, rule.weights, beta)
    params = SmoothingParams(epsilon=1e-4, beta=beta)
    got = smoothed_cvar(values, var, params, grid)
    # analytic CVaR_0.5 of U(-a, a) is a/2 with a = sqrt(3)
    assert abs(got - cvar_exact) / abs(cvar_exact) < 1e-2
    assert cvar_exact == pytest.approx(np.sqrt(3.0) / 2.0, rel=1e-2)


def test_smoothed_cvar_large_epsilon_series():
    # eps much larger than the spread: R -> t + (E[X] - t + eps ln2 + O(s^2/eps))/(1-b)
    grid = uniform_grid(1, 9)
    values = TtVector([grid.nodes(0).reshape(1, 9, 1)])  # mean zero, spread ~1
    t = 0.1
    eps = 1e4
    params = SmoothingParams(epsilon=eps, beta=0.5)
    got = smoothed_cvar(values, t, params, grid)
    approx = t + params.tail_weight * (0.0 - t) / 2.0 + params.tail_weight * eps * np.log(2.0)
    # the correction term (E[X]-t)/2 comes from g_eps(x) ~ eps ln2 + x/2 + x^2/(8eps)
    assert got == pytest.approx(approx, abs=1e-3 * eps)


def test_smoothed_cvar_dominates_exact():
    # g_eps >= (.)_+ pointwise, so the smoothed value dominates the sorted oracle
    rng = np.random.default_rng(2)
    grid = uniform_grid(2, 7)
    dense_vals = rng.uniform(0, 3, size=grid.shape)
    from ttcvar.ttcore import tt_from_dense

    values = tt_from_dense(dense_vals)
    beta = 0.7
    w = grid.dense_weights().reshape(-1)
    var, cvar = exact_cvar_discrete(dense_vals.reshape(-1), w, beta)
    params = SmoothingParams(epsilon=0.05, beta=beta)
    got = smoothed_cvar(values, var, params, grid, CrossConfig(rel_tolerance=1e-9, seed=3))
    assert got >= cvar - 1e-9
    assert got <= cvar + params.epsilon * np.log(2) / (1 - beta) + 1e-6
