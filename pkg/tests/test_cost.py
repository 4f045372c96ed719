import json

import numpy as np
import pytest

from mfsmp import chain, cost, examples, meanfield
from mfsmp.errors import InadmissiblePerturbation, InsufficientPaths

SPEC = examples.TwoStateSpec()
PR1 = examples.ex1_problem(SPEC)


def constant_cost(c):
    return cost.CostSpec(terminal=lambda x, m: np.full(len(x), c))


def ex1_oracle(c, T=1.0):
    Q = chain.validate_generator([[-SPEC.alpha, SPEC.alpha], [c, -c]], [0, 1])
    return 0.5 * c * c * T + chain.transition_matrix(Q, T)[0] @ SPEC.h


def test_cost_estimate_json():
    est = cost.CostEstimate(1.5, 0.1, 10, "direct")
    assert json.loads(est.to_json()) == {"value": 1.5, "se": 0.1, "n_paths": 10, "estimator": "direct"}


def test_constant_terminal_direct_is_exact():
    est = cost.estimate_cost_direct(constant_cost(2.5), PR1.intensity, examples.ex1_control(SPEC), None, PR1.law,
                                    1.0, 1000, 1)
    assert est.value == 2.5 and est.se == 0.0


def test_constant_terminal_reweighted_under_reference_is_exact():
    same = examples.TwoStateSpec(alpha=SPEC.g_ab)
    intensity = examples.ex1_intensity(same)
    ctrl = chain.FeedbackControl(np.array([0.0, SPEC.g_ba]))
    est = cost.estimate_cost_reweighted(constant_cost(2.5), intensity, same.generator(), ctrl, None, PR1.law, 1.0,
                                        1000, 1)
    assert est.value == pytest.approx(2.5, abs=1e-13) and est.se < 1e-13


def test_constant_terminal_reweighted_is_unbiased():
    est = cost.estimate_cost_reweighted(constant_cost(2.5), PR1.intensity, PR1.G, examples.ex1_control(SPEC), None,
                                        PR1.law, 1.0, 100_000, 1)
    assert abs(est.value - 2.5) <= 3 * est.se


def test_reweighted_reduces_to_plain_expectation_under_reference():
    same = examples.TwoStateSpec(alpha=SPEC.g_ab)
    G = same.generator()
    ctrl = chain.FeedbackControl(np.array([SPEC.g_ba, SPEC.g_ba]))
    batch = meanfield.reference_sample(G, PR1.law, 1.0, 5000, 3)
    vals = cost.reweighted_samples(examples.ex1_cost(same), examples.ex1_intensity(same), G, ctrl, None, batch,
                                   cells=8)
    plain = 0.5 * SPEC.g_ba**2 + same.h[batch.final_idx()]
    np.testing.assert_allclose(vals, plain, atol=1e-13)


@pytest.mark.parametrize("c", [0.5, 1.0])
def test_constant_control_cost_matches_matrix_exponential(c):
    ctrl = chain.FeedbackControl(np.array([c, c]))
    oracle = ex1_oracle(c)
    rw = cost.estimate_cost_reweighted(PR1.cost, PR1.intensity, PR1.G, ctrl, None, PR1.law, 1.0, 100_000, 42)
    dr = cost.estimate_cost_direct(PR1.cost, PR1.intensity, ctrl, None, PR1.law, 1.0, 100_000, 43)
    assert abs(rw.value - oracle) <= 3 * rw.se
    assert abs(dr.value - oracle) <= 3 * dr.se


def test_ex2_estimators_agree_at_closed_form_control():
    spec = examples.TwoStateSpec(alpha=0.3)
    pr = examples.ex2_problem(spec, 1.0, 0.0)
    mu = examples.riccati_mean_curve(examples.ex2_riccati_coeffs(0, 1, 0.3, 0.0), 1.0, 256)
    ctrl = examples.ex2_control(spec, mu)
    rw = cost.estimate_cost_reweighted(pr.cost, pr.intensity, pr.G, ctrl, mu, pr.law, 1.0, 100_000, 42)
    dr = cost.estimate_cost_direct(pr.cost, pr.intensity, ctrl, mu, pr.law, 1.0, 100_000, 43)
    assert abs(rw.value - dr.value) <= 3 * np.hypot(rw.se, dr.se)


def test_insufficient_paths():
    with pytest.raises(InsufficientPaths):
        cost.estimate_cost_direct(PR1.cost, PR1.intensity, None, None, PR1.law, 1.0, 1, 0)
    with pytest.raises(InsufficientPaths):
        cost.estimate_cost_reweighted(PR1.cost, PR1.intensity, PR1.G, None, None, PR1.law, 1.0, 1, 0)


def test_canned_directions():
    dirs = cost.canned_directions(2.0, 1, c=0.1)
    assert [n for n, _ in dirs] == ["+const", "-const", "+ramp_up", "-ramp_up", "+ramp_down", "-ramp_down",
                                    "+sine", "-sine"]
    t = np.array([1.0, 1.0])
    x = np.array([0, 1])
    np.testing.assert_allclose(dict(dirs)["+ramp_up"](t, x), [0.0, 0.05])
    np.testing.assert_allclose(dict(dirs)["-sine"](t, x), [0.0, -0.1])


def test_probe_with_zero_eps_reports_zero():
    rep = cost.perturbation_probe(PR1.cost, PR1.intensity, PR1.G, examples.ex1_control(SPEC),
                                  cost.canned_directions(1.0, 1), 0.0, PR1.law, 1.0, 1000, 1, cells=16)
    assert all(d["diff"] == 0.0 for d in rep.differences)
    assert rep.fraction_ok == 1.0


def test_probe_positive_constant_direction():
    up = [("+0.1", lambda t, x: np.where(np.asarray(x) == 1, 0.1, 0.0))]
    rep = cost.perturbation_probe(PR1.cost, PR1.intensity, PR1.G, examples.ex1_control(SPEC), up, 1.0, PR1.law,
                                  1.0, 100_000, 42)
    assert rep.passed


def test_probe_zero_control_is_worse():
    ctrl = examples.ex1_control(SPEC)
    to_zero = [("zero", lambda t, x: -ctrl(t, x))]
    rep = cost.perturbation_probe(PR1.cost, PR1.intensity, PR1.G, ctrl, to_zero, 1.0, PR1.law, 1.0, 100_000, 42)
    d = rep.differences[0]
    assert d["diff"] >= -3 * d["se"]
    assert d["diff"] > 0


def test_probe_rejects_inadmissible_direction():
    down = [("-2", lambda t, x: np.full(np.shape(x), -2.0))]
    with pytest.raises(InadmissiblePerturbation):
        cost.perturbation_probe(PR1.cost, PR1.intensity, PR1.G, examples.ex1_control(SPEC), down, 1.0, PR1.law,
                                1.0, 100, 1, cells=8)


def test_tabulate_control_uses_midpoints():
    grid = np.linspace(0, 1, 5)
    tab = cost.tabulate_control(lambda t, x: t + 10 * x, grid, 2)
    np.testing.assert_allclose(tab.table[:, 0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(tab.table[:, 1], tab.table[:, 0] + 10)
