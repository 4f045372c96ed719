import numpy as np
import pytest

from mfsmp import chain, examples, meanfield
from mfsmp.errors import NoConvergence

LAW0 = chain.initial_law([0, 1], 0)


@pytest.fixture(scope="module")
def ex2_setup():
    spec = examples.TwoStateSpec(alpha=0.3)
    mu = examples.riccati_mean_curve(examples.ex2_riccati_coeffs(0, 1, 0.3, 0.0), 1.0, 256)
    return spec, examples.ex2_problem(spec, 1.0, 0.0), mu, examples.ex2_control(spec, mu)


def test_mean_curve_csv_round_trip():
    curve = meanfield.MeanCurve(np.linspace(0, 1, 5), np.array([0, 0.1, 0.2, 1 / 3, 0.4]))
    text = curve.to_csv()
    assert text.splitlines()[0] == "t,mu"
    assert len(text.splitlines()) == 6
    back = meanfield.MeanCurve.from_csv(text)
    np.testing.assert_array_equal(back.values, curve.values)


def test_mean_curve_left_limit_convention():
    curve = meanfield.MeanCurve(np.array([0.0, 0.5, 1.0]), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(curve.left(np.array([0.0, 0.25, 0.5, 0.75, 1.0])), [1, 1, 1, 2, 2])


def test_mean_curve_rejects_non_finite():
    with pytest.raises(ValueError):
        meanfield.MeanCurve(np.array([0.0, 1.0]), np.array([0.0, np.nan]))


def test_fixed_point_config_validation():
    with pytest.raises(ValueError):
        meanfield.FixedPointConfig(damping=0.0)
    with pytest.raises(ValueError):
        meanfield.FixedPointConfig(tol=0.0)


def test_kappa_one_curve_is_normalized():
    spec = examples.TwoStateSpec()
    ctrl = chain.FeedbackControl(np.array([0.0, 2.0]))
    est = meanfield.estimate_mean_curve(examples.ex1_intensity(spec), spec.generator(), ctrl, None, np.ones(2),
                                        LAW0, 1.0, 100_000, 42, cells=32)
    se = np.maximum(est.se, 1e-15)
    assert np.all(np.abs(est.values - 1.0) <= 3 * se)


def test_mean_free_curve_matches_matrix_exponential():
    spec = examples.TwoStateSpec(alpha=2.0)
    ctrl = chain.FeedbackControl(np.array([0.0, 0.5]))
    est = meanfield.estimate_mean_curve(examples.ex1_intensity(spec), spec.generator(), ctrl, None, [0.0, 1.0],
                                        LAW0, 1.0, 100_000, 8, cells=4)
    Q = chain.validate_generator([[-2.0, 2.0], [0.5, -0.5]], [0, 1])
    for k, t in enumerate(est.grid[1:], start=1):
        oracle = chain.transition_matrix(Q, t)[0, 1]
        assert abs(est.values[k] - oracle) <= 3 * est.se[k]


def test_mean_free_fixed_point_takes_one_iteration():
    spec = examples.TwoStateSpec()
    res = meanfield.solve_mean_fixed_point(examples.ex1_intensity(spec), spec.generator(),
                                           chain.FeedbackControl(np.array([0.0, 1.0])), [0.0, 1.0], LAW0, 1.0,
                                           meanfield.FixedPointConfig(n_paths=2000, cells=16), 1)
    assert res.iterations == 1


def test_forward_law_matches_matrix_exponential():
    spec = examples.TwoStateSpec(alpha=2.0)
    lp = meanfield.forward_law(examples.ex1_intensity(spec), chain.FeedbackControl(np.array([0.0, 0.5])),
                               [0.0, 1.0], LAW0, 1.0, cells=64)
    Q = chain.validate_generator([[-2.0, 2.0], [0.5, -0.5]], [0, 1])
    np.testing.assert_allclose(lp.law[-1], chain.transition_matrix(Q, 1.0)[0], atol=1e-10)


def test_fixed_point_matches_mckean_vlasov_ode(ex2_setup):
    """The Monte-Carlo fixed point agrees with the deterministic forward equation of the law."""
    spec, pr, mu, ctrl = ex2_setup
    res = meanfield.solve_mean_fixed_point(pr.intensity, pr.G, ctrl, pr.kappa, pr.law, 1.0,
                                           meanfield.FixedPointConfig(n_paths=100_000), 42)
    lp = meanfield.forward_law(pr.intensity, ctrl, pr.kappa, pr.law, 1.0)
    assert np.max(np.abs(res.curve.values - lp.mean.values)) <= 0.02
    assert np.all(np.abs(res.curve.values - lp.mean.values) <= 3 * np.maximum(res.curve.se, 1e-12) + 1e-3)


def test_fixed_point_at_closed_form_control_matches_riccati(ex2_setup):
    """Module example: the chain at the closed-form control reproduces the Riccati mean to 0.02."""
    spec, pr, mu, ctrl = ex2_setup
    res = meanfield.solve_mean_fixed_point(pr.intensity, pr.G, ctrl, pr.kappa, pr.law, 1.0,
                                           meanfield.FixedPointConfig(damping=0.5, tol=0.02, n_paths=100_000), 42)
    assert np.max(np.abs(res.curve.values - mu.values)) <= 0.02


def test_one_pass_at_riccati_input_reproduces_it(ex2_setup):
    """Module example: one reweighting pass with the Riccati curve plugged in returns it within 3 SE."""
    spec, pr, mu, ctrl = ex2_setup
    est = meanfield.estimate_mean_curve(pr.intensity, pr.G, ctrl, mu, pr.kappa, pr.law, 1.0, 100_000, 42)
    assert np.all(np.abs(est.values - mu.values)[1:] <= 3 * est.se[1:])


def test_damping_does_not_change_the_fixed_point(ex2_setup):
    spec, pr, mu, ctrl = ex2_setup
    batch = meanfield.reference_sample(pr.G, pr.law, 1.0, 20_000, 5)
    cur = {}
    for theta in (0.5, 1.0):
        cfg = meanfield.FixedPointConfig(damping=theta, tol=1e-6, n_paths=20_000, max_iters=200)
        cur[theta] = meanfield.solve_mean_fixed_point(pr.intensity, pr.G, ctrl, pr.kappa, pr.law, 1.0, cfg, 5,
                                                      batch=batch).curve
    se = np.maximum(cur[0.5].se, cur[1.0].se)
    assert np.all(np.abs(cur[0.5].values - cur[1.0].values) <= 1e-6 + 3 * se)


def test_iterates_stay_in_state_range(ex2_setup):
    spec, pr, mu, ctrl = ex2_setup
    cfg = meanfield.FixedPointConfig(max_iters=1, tol=1e-12, n_paths=5000)
    with pytest.raises(NoConvergence) as info:
        meanfield.solve_mean_fixed_point(pr.intensity, pr.G, ctrl, pr.kappa, pr.law, 1.0, cfg, 3)
    best = info.value.best.curve
    assert np.all((best.values >= 0.0) & (best.values <= 1.0))
    assert info.value.iterations == 1
