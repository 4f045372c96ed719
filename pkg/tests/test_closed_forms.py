"""Independent oracles for the quantities the worked examples state in closed form."""
import dataclasses

import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp

from mfsmp import adjoint, chain, examples, meanfield
from mfsmp.girsanov import uniform_grid


def bernoulli_by_quadrature(alpha, qT, t, T):
    """q' = alpha q + q^2 / 2 integrated backward with scipy, no closed form used."""
    sol = solve_ivp(lambda s, q: alpha * q + 0.5 * q * q, (T, 0.0), [qT], rtol=1e-12, atol=1e-14,
                    dense_output=True)
    return sol.sol(t)[0]


@pytest.mark.parametrize("h", [(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)])
def test_example_one_adjoint_is_the_bernoulli_solution(h):
    spec = examples.TwoStateSpec(h_a=h[0], h_b=h[1])
    grid = uniform_grid(1.0, 256)
    fld = adjoint.solve_adjoint_ode(examples.ex1_driver(spec), spec.generator(), grid)
    q_ba = fld.q_edge(1, 0)
    oracle = bernoulli_by_quadrature(spec.alpha, h[1] - h[0], grid, 1.0)
    np.testing.assert_allclose(q_ba, oracle, atol=1e-8)
    np.testing.assert_allclose(examples.ex1_value_oracle(spec, grid, 1.0), oracle, atol=1e-10)


def test_example_one_adjoint_is_not_constant_when_costs_differ():
    spec = examples.TwoStateSpec(h_a=0.0, h_b=1.0)
    q0 = bernoulli_by_quadrature(spec.alpha, 1.0, 0.0, 1.0)
    assert abs(q0 - 1.0) > 0.5


def constant_feedback_cost(spec, c, T=1.0):
    """Running cost c^2/2 while in b plus E h(x(T)), by quadrature of the transition matrix."""
    Q = chain.validate_generator([[-spec.alpha, spec.alpha], [c, -c]], [0, 1])
    occ = quad(lambda s: chain.transition_matrix(Q, s)[0, 1], 0.0, T, epsabs=1e-13)[0]
    return 0.5 * c * c * occ + chain.transition_matrix(Q, T)[0] @ spec.h


def test_bernoulli_control_beats_closed_form_control():
    spec = examples.TwoStateSpec()
    pr = examples.ex1_problem(spec)
    closed = constant_feedback_cost(spec, spec.h_b - spec.h_a)
    assert adjoint.expected_cost_ode(pr, examples.ex1_control(spec)) == pytest.approx(closed, abs=1e-9)
    grid = uniform_grid(1.0, 256)
    mid = 0.5 * (grid[:-1] + grid[1:])
    table = np.zeros((256, 2))
    table[:, 1] = examples.ex1_value_oracle(spec, mid, 1.0)
    markov = adjoint.expected_cost_ode(pr, chain.TabulatedControl(grid, table))
    assert markov < closed - 1e-3


def mean_by_occupation(a, b, alpha, m0, T, ts):
    """E x(t) from the occupation probability of b with the closed-form feedback plugged in."""
    def rhs(t, p):
        mu = a + (b - a) * p[0]
        u = (b * b - a * a) + 2 * mu * (a - b)
        return [alpha * (1 - p[0]) - max(u + mu, 0.0) * p[0]]
    sol = solve_ivp(rhs, (0.0, T), [(m0 - a) / (b - a)], rtol=1e-12, atol=1e-14, dense_output=True)
    return a + (b - a) * sol.sol(ts)[0]


@pytest.mark.parametrize("abc", [(0, 1, 0.3, 0.0), (0, 1, 1.0, 0.25), (0, 2, 0.7, 0.0)])
def test_mean_equation_has_linear_coefficient_shifted_by_alpha(abc):
    a, b, alpha, m0 = abc
    printed = examples.ex2_riccati_coeffs(a, b, alpha, m0)
    corrected = dataclasses.replace(printed, B=printed.B - alpha)
    T = 0.5
    curve, _ = examples.solve_constrained_riccati(corrected, 1e-4, T, horizon=T, record_every=10)
    oracle = mean_by_occupation(a, b, alpha, m0, T, curve.grid)
    np.testing.assert_allclose(curve.values, oracle, atol=1e-8)


def test_forward_law_at_closed_form_control_follows_corrected_mean():
    spec = examples.TwoStateSpec(alpha=0.3)
    pr = examples.ex2_problem(spec, 1.0, 0.0)
    printed = examples.ex2_riccati_coeffs(0, 1, 0.3, 0.0)
    corrected = dataclasses.replace(printed, B=printed.B - 0.3)
    mu = examples.riccati_mean_curve(corrected, 1.0, 1024)
    lp = meanfield.forward_law(pr.intensity, examples.ex2_control(spec, mu), pr.kappa, pr.law, 1.0, cells=1024)
    assert np.max(np.abs(lp.mean.values - mu.values)) <= 1e-3
    printed_mu = examples.riccati_mean_curve(printed, 1.0, 1024)
    assert np.max(np.abs(printed_mu.values - mu.values)) > 0.02


@pytest.mark.parametrize("row", [r for r in examples.published_table_rows()])
def test_closed_form_exit_times_match_quadrature(row):
    a, b, alpha, m0, _ = row
    p = examples.ex2_riccati_coeffs(a, b, alpha, m0)
    if p.A == 0:
        pytest.skip("linear mean equation")
    closed = examples.riccati_exit_time_closed_form(p)
    if closed is None:
        return
    val, _ = quad(lambda m: 1.0 / p.rhs(m), m0, p.exit_level, epsabs=1e-12, epsrel=1e-12, limit=200)
    assert closed == pytest.approx(val, rel=1e-8, abs=1e-10)
