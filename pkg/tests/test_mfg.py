import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglab.errors import ConfigurationError, DivergenceError, NonConvergenceError, PreconditionError
from mfglab.mfg import BoundaryRegime, RunningCost, pde_residual, solve_mfg
from mfglab.parabolic import TimeGrid, solve_heat_forward

from conftest import planted_cost, positive_direction, regime_of


def test_regime_validation():
    assert BoundaryRegime("NI", 0.4).bc == "DN"
    assert BoundaryRegime("DI", 0.4).kind == "D"
    with pytest.raises(ConfigurationError):
        BoundaryRegime("XX")
    with pytest.raises(ConfigurationError):
        BoundaryRegime("DI", 0.0)
    with pytest.raises(ConfigurationError):
        BoundaryRegime("NH", 0.2)


def test_class_b_cost_needs_vanishing_first_coefficient(small):
    with pytest.raises(ConfigurationError):
        RunningCost(0.5, (np.ones(small.n_active),))


@settings(max_examples=30, deadline=None)
@given(
    c=st.lists(st.floats(-2, 2), min_size=1, max_size=4),
    point=st.sampled_from([0.0, 0.5]),
    m=st.floats(-1, 1),
)
def test_cost_series_and_derivatives(c, point, m):
    coeffs = [np.array([v]) for v in c]
    if point:
        coeffs[0] = np.zeros(1)
    cost = RunningCost(point, tuple(coeffs))
    direct = sum(coeffs[i][0] * (m - point) ** (i + 1) / math.factorial(i + 1) for i in range(len(c)))
    assert cost.evaluate(np.array([m]))[0] == pytest.approx(direct, abs=1e-12)
    assert cost.evaluate(np.array([m - point]), base=point)[0] == pytest.approx(direct, abs=1e-12)
    # derivatives at the expansion point recover the coefficients
    for j in range(1, len(c) + 1):
        assert cost.derivative(j, point)[0] == pytest.approx(coeffs[j - 1][0])
    assert cost.coefficient(len(c) + 1)[0] == 0


def test_zero_data_gives_zero_solution(holed, tg):
    for tag in ("DH", "NH"):
        sol = solve_mfg(holed, tg, 0.2, RunningCost.zero(holed), np.zeros(holed.n_active), regime_of(tag))
        assert np.abs(sol.u).max() == 0 and np.abs(sol.m).max() == 0


def test_inhomogeneous_base_state(holed, tg):
    reg = regime_of("DI", 0.5)
    sol = solve_mfg(holed, tg, 0.2, planted_cost(holed, "DI"), np.full(holed.n_active, 0.5), reg)
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-14)
    np.testing.assert_allclose(sol.m, 0.5, atol=1e-14)


def test_zero_cost_reduces_to_heat_flow(holed, tg):
    m0 = 0.1 * positive_direction(holed)
    sol = solve_mfg(holed, tg, 0.2, RunningCost.zero(holed), m0, regime_of("NH"))
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-15)
    np.testing.assert_allclose(sol.m, solve_heat_forward(holed, tg, 0.2, m0, bc="DN"), atol=1e-14)


def test_class_regime_mismatch(small, tg):
    with pytest.raises(ConfigurationError):
        solve_mfg(small, tg, 0.2, planted_cost(small, "DH"), np.zeros(small.n_active), regime_of("DI"))
    with pytest.raises(ConfigurationError):
        solve_mfg(small, tg, 0.2, planted_cost(small, "DI"), np.zeros(small.n_active), regime_of("DH"))
    # a class-B cost expanded about the wrong base
    with pytest.raises(ConfigurationError):
        solve_mfg(small, tg, 0.2, planted_cost(small, "DI"), np.zeros(small.n_active), BoundaryRegime("DI", 0.7))


@pytest.mark.parametrize("tag", ["DH", "NH", "DI", "NI"])
def test_discrete_equations_satisfied(small_holed, tg, tag):
    reg = regime_of(tag)
    m0 = 0.2 * positive_direction(small_holed)
    sol = solve_mfg(small_holed, tg, 0.2, planted_cost(small_holed, tag), m0, reg, deviation=True, tol=1e-12)
    r_hjb, r_fp = pde_residual(sol, planted_cost(small_holed, tag))
    assert r_hjb < 1e-8 and r_fp < 1e-8
    assert sol.history[-1] == sol.final_update


def test_fixed_point_independent_of_initial_guess(small_holed, tg):
    reg = regime_of("DH")
    cost = planted_cost(small_holed, "DH")
    m0 = 0.2 * positive_direction(small_holed)
    a = solve_mfg(small_holed, tg, 0.2, cost, m0, reg, tol=1e-13)
    rng = np.random.default_rng(0)
    guess = (0.1 * rng.standard_normal(a.u.shape), 0.1 * rng.standard_normal(a.u.shape))
    b = solve_mfg(small_holed, tg, 0.2, cost, m0, reg, tol=1e-13, initial_guess=guess)
    np.testing.assert_allclose(a.u, b.u, atol=1e-11)
    np.testing.assert_allclose(a.m, b.m, atol=1e-11)


def test_iteration_limits(small, tg):
    cost = planted_cost(small, "DH")
    m0 = 0.2 * positive_direction(small)
    with pytest.raises(NonConvergenceError):
        solve_mfg(small, tg, 0.2, cost, m0, regime_of("DH"), max_iter=2)
    with pytest.raises(PreconditionError):
        solve_mfg(small, tg, 0.2, cost, m0, regime_of("DH"), tol=0.0)


def test_large_data_reports_divergence(small):
    tg = TimeGrid(2.0, 8)
    cost = RunningCost(0.0, (np.full(small.n_active, 50.0), np.full(small.n_active, 200.0)))
    with pytest.raises((DivergenceError, NonConvergenceError)):
        solve_mfg(small, tg, 0.05, cost, 20.0 * positive_direction(small), regime_of("NH"), max_iter=60)
