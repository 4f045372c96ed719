import json

import numpy as np
import pytest

from mfsmp import chain, girsanov
from mfsmp.errors import UnsupportedTransition, ZeroRateAtJump
from mfsmp.examples import TwoStateSpec, ex1_intensity

G2 = chain.validate_generator([[-1.0, 1.0], [1.0, -1.0]], [0, 1])


def rate_matrix(lam):
    lam = np.asarray(lam, dtype=float)
    return chain.Intensity(np.array([0, 1]), lambda t, x, m, u: lam[x], float(lam.sum(axis=1).max()))


def time_varying():
    """a -> b at 1 + sin(3t), b -> a at the control."""
    def rates(t, x, m, u):
        r = np.zeros((len(x), 2))
        r[:, 1] = np.where(x == 0, 1 + np.sin(3 * t), 0.0)
        r[:, 0] = np.where(x == 1, u, 0.0)
        return r
    return chain.Intensity(np.array([0, 1]), rates, 3.0)


def test_likelihood_ratio_examples():
    ell = girsanov.likelihood_ratio_field(chain.constant_intensity(G2), G2)
    np.testing.assert_array_equal(ell(np.zeros(2), np.array([0, 1])), np.zeros((2, 2)))
    ell = girsanov.likelihood_ratio_field(rate_matrix([[0, 1], [2, 0]]), G2)
    assert ell(np.zeros(1), np.array([1]))[0, 0] == 1.0
    G_half = chain.validate_generator([[0.0, 0.0], [1.0, -1.0]], [0, 1])
    ell = girsanov.likelihood_ratio_field(rate_matrix([[0, 1], [1, 0]]), G_half)
    with pytest.raises(UnsupportedTransition):
        ell(np.zeros(1), np.array([0]))


def test_density_is_one_under_reference():
    path = chain.JumpPath(0, (0.2, 0.7), (1, 0), 1.0)
    d = girsanov.density_product(path, chain.constant_intensity(G2), G2)
    np.testing.assert_allclose(d.values, 1.0, rtol=0, atol=1e-15)
    e = girsanov.density_sde_euler(path, chain.constant_intensity(G2), G2, dt=0.1)
    np.testing.assert_allclose(e.values, 1.0, rtol=0, atol=1e-15)


def test_density_no_jump_path():
    lam = [[0, 2.5], [0.5, 0]]
    d = girsanov.density_product(chain.JumpPath(0, (), (), 2.0), rate_matrix(lam), G2)
    assert d.values[-1] == pytest.approx(np.exp(-(2.5 - 1) * 2.0), rel=1e-13)


def test_density_one_jump_path():
    lam = [[0, 2.5], [0.5, 0]]
    tau, T = 0.4, 1.0
    d = girsanov.density_product(chain.JumpPath(0, (tau,), (1,), T), rate_matrix(lam), G2)
    oracle = 2.5 * np.exp(-(2.5 - 1) * tau - (0.5 - 1) * (T - tau))
    assert d.values[-1] == pytest.approx(oracle, rel=1e-13)
    assert d.at(tau) == pytest.approx(2.5 * np.exp(-(2.5 - 1) * tau), rel=1e-13)
    e = girsanov.density_sde_euler(chain.JumpPath(0, (tau,), (1,), T), rate_matrix(lam), G2, dt=1.0)
    # one explicit drift step, then the exact jump factor
    k = int(np.searchsorted(e.grid, tau))
    drift = 1 - (2.5 - 1) * (tau - e.grid[k - 1])
    assert e.values[k] == pytest.approx(e.values[k - 1] * drift * 2.5, rel=1e-14)


def test_zero_rate_at_jump_is_flagged():
    path = chain.JumpPath(0, (0.3,), (1,), 1.0)
    d = girsanov.density_product(path, rate_matrix([[0, 0], [1, 0]]), G2)
    assert d.zero_rate
    assert d.values[-1] == 0.0
    with pytest.raises(ZeroRateAtJump):
        girsanov.density_product(path, rate_matrix([[0, 0], [1, 0]]), G2, strict=True)


def test_gauss_and_cellwise_sweeps_agree():
    G = chain.validate_generator([[-1.0, 1.0], [2.0, -2.0]], [0, 1])
    intensity = ex1_intensity(TwoStateSpec(alpha=1.7))
    control = chain.FeedbackControl(np.array([0.0, 0.8]))
    batch = chain.simulate_paths(chain.constant_intensity(G), chain.initial_law(G.states, 0), 1.0, 300, seed=2)
    grid = girsanov.uniform_grid(1.0, 16)
    run = lambda t, x, u: 0.5 * u**2  # noqa: E731
    a = girsanov.sweep(batch, grid, intensity, G, control=control, running=run, edges=[(0, 1), (1, 0)],
                       cellwise=True, running_cellwise=True)
    b = girsanov.sweep(batch, grid, intensity, G, control=control, running=run, edges=[(0, 1), (1, 0)],
                       cellwise=False)
    np.testing.assert_allclose(a.log_density, b.log_density, atol=1e-12)
    np.testing.assert_allclose(a.running, b.running, atol=1e-12)
    np.testing.assert_allclose(a.compensators, b.compensators, atol=1e-12)


def test_time_varying_density_matches_quadrature():
    path = chain.JumpPath(0, (0.45,), (1,), 1.0)
    control = lambda t, x: np.full(np.shape(x), 0.3)  # noqa: E731
    d = girsanov.density_product(path, time_varying(), G2, control=control)
    from scipy.integrate import quad

    drift = quad(lambda s: np.sin(3 * s), 0, 0.45)[0] + (0.3 - 1) * 0.55
    oracle = (1 + np.sin(3 * 0.45)) * np.exp(-drift)
    assert d.values[-1] == pytest.approx(oracle, rel=1e-9)


def _euler_errors(dts):
    path = chain.JumpPath(0, (0.23, 0.61, 0.88), (1, 0, 1), 1.0)
    control = lambda t, x: np.full(np.shape(x), 0.4)  # noqa: E731
    grid = girsanov.uniform_grid(1.0, 8)
    exact = girsanov.density_product(path, time_varying(), G2, control=control, grid=grid)
    errs = []
    for dt in dts:
        e = girsanov.density_sde_euler(path, time_varying(), G2, dt, control=control, grid=grid)
        np.testing.assert_allclose(e.grid, exact.grid)
        errs.append(np.max(np.abs(e.values - exact.values)))
    return np.array(errs)


def test_sde_euler_converges_at_first_order():
    dts = np.array([1e-2, 5e-3, 2.5e-3])
    errs = _euler_errors(dts)
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.8 <= slope <= 1.2


def test_martingale_checks_trivial_under_reference():
    rep = girsanov.martingale_checks(chain.constant_intensity(G2), G2, chain.initial_law([0, 1], 0), 1.0, 1000, 3)
    assert rep.mean_L == 1.0 and rep.se_L == 0.0
    assert rep.passed
    d = json.loads(rep.to_json())
    assert set(d) == {"mean_L", "se_L", "pass_L", "per_edge"}
    assert set(d["per_edge"][0]) == {"i", "j", "mean", "se", "pass"}


def test_martingale_checks_example_one_constant_control():
    spec = TwoStateSpec()
    rep = girsanov.martingale_checks(ex1_intensity(spec), spec.generator(), chain.initial_law(spec.states, 0), 1.0,
                                     100_000, 11, control=chain.FeedbackControl(np.array([1.0, 1.0])))
    assert rep.pass_L
    assert all(e["pass"] for e in rep.per_edge)


def test_mean_se():
    m, s = girsanov.mean_se(np.array([1.0, 2.0, 3.0]))
    assert m == 2.0 and s == pytest.approx(1 / np.sqrt(3))
