import numpy as np
import pytest
import statsmodels.api as sm
from scipy.special import expit

from negctrl.errors import NumericalError, ValidationError
from negctrl.estimators import FitCache, stacked_system
from negctrl.inference import (EstimatingBlock, StackedSystem, bootstrap_se, sandwich_variance,
                               wald_interval, wald_test)


def test_ratio_of_means_matches_delta_method():
    rng = np.random.default_rng(1)
    n = 5000
    x = rng.gamma(2.0, size=n)
    y = 3 * x + rng.normal(size=n)
    mx, my = x.mean(), y.mean()
    blocks = [
        EstimatingBlock("mx", [mx], lambda p: x - p["mx"][0]),
        EstimatingBlock("my", [my], lambda p: y - p["my"][0]),
        EstimatingBlock("ratio", [my / mx], lambda p: p["my"][0] / p["mx"][0] - p["ratio"][0] + 0 * x,
                        ("mx", "my")),
    ]
    sw = sandwich_variance(StackedSystem(blocks, n))
    r = my / mx
    manual = np.var(y - r * x) / mx ** 2 / n
    assert sw.se("ratio")[0] == pytest.approx(np.sqrt(manual), rel=1e-6)


def test_logistic_sandwich_matches_robust_glm():
    rng = np.random.default_rng(2)
    n = 3000
    xmat = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < expit(xmat @ [-0.3, 0.8])).astype(float)
    fit = sm.GLM(y, xmat, family=sm.families.Binomial()).fit(cov_type="HC0", tol=1e-12)
    block = EstimatingBlock("b", fit.params,
                            lambda p: xmat * (y - expit(xmat @ p["b"]))[:, None])
    sw = sandwich_variance(StackedSystem([block], n))
    assert np.allclose(sw.cov, fit.cov_params(), rtol=1e-5)


def test_analytic_blocks_agree_with_finite_differences(sim_data, correct_spec):
    theta = FitCache(sim_data, correct_spec).theta("mr")
    system = stacked_system(sim_data, theta)
    analytic = system.jacobian()
    for b in system.blocks:
        b.jacobian = None
    numeric = system.jacobian()
    assert np.allclose(analytic, numeric, atol=1e-5 * np.abs(numeric).max())


def test_unknown_dependency_and_width_errors():
    blk = EstimatingBlock("a", [0.0], lambda p: np.zeros(3), ("ghost",))
    with pytest.raises(ValidationError, match="unknown blocks"):
        StackedSystem([blk], 3)
    blk = EstimatingBlock("a", [0.0, 1.0], lambda p: np.zeros(3))
    with pytest.raises(ValidationError, match="columns"):
        StackedSystem([blk], 3).psi()


def test_singular_bread_is_reported():
    x = np.arange(5.0)
    blocks = [EstimatingBlock("a", [0.0, 0.0], lambda p: np.column_stack([x, x]) + 0 * p["a"][0])]
    with pytest.raises(NumericalError, match="singular bread"):
        sandwich_variance(StackedSystem(blocks, 5))


def test_wald_interval_and_test():
    lo, hi = wald_interval(0.1, 0.02)
    assert (hi - lo) / 2 == pytest.approx(1.959963984540054 * 0.02, abs=1e-15)
    assert isinstance(lo, float)
    lo90, hi90 = wald_interval(0.1, 0.02, 0.9)
    assert hi90 - lo90 < hi - lo
    assert wald_test(1.96, 1.0) == pytest.approx(0.05, abs=1e-3)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ValidationError, match="level"):
            wald_interval(0.1, 0.02, bad)
    with pytest.raises(ValidationError, match="positive"):
        wald_interval(0.1, 0.0)


def test_bootstrap_is_deterministic_and_checks_resamples(sim_data):
    est = lambda d: d.y.mean()  # noqa: E731
    a = bootstrap_se(sim_data, est, resamples=60, seed=4)
    b = bootstrap_se(sim_data, est, resamples=60, seed=4)
    assert np.array_equal(a.estimates, b.estimates)
    assert a.se == pytest.approx(sim_data.y.std() / np.sqrt(sim_data.n), rel=0.3)
    with pytest.raises(ValidationError, match="at least"):
        bootstrap_se(sim_data, est, resamples=10)


def test_bootstrap_aborts_on_many_failures(sim_data):
    def flaky(d):
        raise NumericalError("boom")
    with pytest.raises(NumericalError, match="bootstrap fits failed"):
        bootstrap_se(sim_data, flaky, resamples=50)
