import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from trendwatch.errors import DataError, DegenerateDataError
from trendwatch.localreg import (
    FitSeries,
    corrected_log,
    estimate_dispersion,
    fit_linear_log,
    fit_negbin,
    fit_poisson,
    fit_window,
    growth_pvalue,
    rolling_fit,
)
from trendwatch.panel import StreamPanel, Window


def _window(values, end=1000):
    return Window(values=np.asarray(values, dtype=float), end_date=end)


def _ols_oracle(values):
    """Normal-equations solve of log(y~) on the 1-based time index."""
    y = corrected_log(np.asarray(values, dtype=float))
    n = len(y)
    X = np.column_stack([np.ones(n), np.arange(1, n + 1)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def test_corrected_log_shifts_whole_window_on_zero():
    np.testing.assert_allclose(corrected_log(np.array([0.0, 1.0])), np.log([0.5, 1.5]))
    np.testing.assert_allclose(corrected_log(np.array([2.0, 4.0])), np.log([2.0, 4.0]))


def test_linear_log_matches_normal_equations():
    rng = np.random.default_rng(0)
    for _ in range(50):
        vals = rng.poisson(50, size=14).astype(float)
        fit = fit_linear_log(_window(vals))
        alpha, beta = _ols_oracle(vals)
        assert fit.beta_hat == pytest.approx(beta, abs=1e-10)
        assert fit.alpha_hat == pytest.approx(alpha, abs=1e-10)


def test_linear_log_constant_window_is_exactly_null():
    fit = fit_linear_log(_window([7.0] * 10))
    assert fit.beta_hat == 0.0
    assert fit.p_one_sided == 0.5


def test_linear_log_exact_exponential():
    n, r = 21, 0.05
    vals = 30.0 * np.exp(r * np.arange(1, n + 1))
    fit = fit_linear_log(_window(vals))
    assert fit.beta_hat == pytest.approx(r, abs=1e-12)
    assert fit.se_beta == pytest.approx(0.0, abs=1e-9)


@given(
    st.lists(st.floats(min_value=1e-6, max_value=1e6), min_size=5, max_size=40),
    st.floats(min_value=1e-3, max_value=1e3),
)
def test_linear_log_scale_equivariance(values, kappa):
    # multiplying by kappa shifts the intercept, never the slope
    base = fit_linear_log(_window(values))
    scaled = fit_linear_log(_window([kappa * v for v in values]))
    assert scaled.beta_hat == pytest.approx(base.beta_hat, abs=1e-9, rel=1e-9)


@given(st.lists(st.floats(min_value=0.1, max_value=1e5), min_size=5, max_size=30))
def test_linear_log_time_reversal_negates_beta(values):
    fwd = fit_linear_log(_window(values))
    rev = fit_linear_log(_window(values[::-1]))
    assert rev.beta_hat == -fwd.beta_hat  # exact, by symmetry of the closed form


def _poisson_nll(theta, y):
    i = np.arange(1, len(y) + 1)
    eta = theta[0] + theta[1] * i
    return float(np.sum(np.exp(eta)) - y @ eta)


def _negbin_nll(theta, y, c):
    i = np.arange(1, len(y) + 1)
    mu = np.exp(theta[0] + theta[1] * i)
    r = 1.0 / c
    return float(-np.sum(y * np.log(mu / (r + mu)) - r * np.log1p(mu / r)))


def test_poisson_matches_quasi_newton_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        vals = rng.poisson(40 * np.exp(0.03 * np.arange(14))).astype(float)
        if vals.sum() == 0:
            continue
        fit = fit_poisson(_window(vals))
        assert fit.converged
        res = minimize(_poisson_nll, [np.log(vals.mean() + 1), 0.0], args=(vals,), method="BFGS")
        assert fit.beta_hat == pytest.approx(res.x[1], abs=1e-5)


def test_poisson_score_zero_at_optimum():
    vals = np.array([3.0, 5, 4, 8, 7, 9, 12, 11, 15, 14])
    fit = fit_poisson(_window(vals))
    i = np.arange(1, len(vals) + 1)
    mu = np.exp(fit.alpha_hat + fit.beta_hat * i)
    score = np.array([np.sum(vals - mu), np.sum((vals - mu) * i)])
    assert np.max(np.abs(score)) < 1e-8


def test_poisson_rejects_nonintegers_and_all_zero():
    with pytest.raises(DataError):
        fit_poisson(_window([1.5, 2.0, 3.0]))
    with pytest.raises(DegenerateDataError):
        fit_poisson(_window([0.0, 0.0, 0.0, 0.0]))


def test_dispersion_plugin_nonnegative_and_zero_for_poisson():
    rng = np.random.default_rng(2)
    vals = rng.poisson(100, 200).astype(float)
    w = Window(values=vals[:30], end_date=30)
    fit = fit_poisson(w)
    i = np.arange(1, 31)
    mu = np.exp(fit.alpha_hat + fit.beta_hat * i)
    c = estimate_dispersion(w, mu)
    assert c >= 0.0


def test_negbin_wider_se_than_poisson_on_overdispersed():
    rng = np.random.default_rng(3)
    mu = 80.0
    c = 0.5
    vals = rng.negative_binomial(1 / c, 1 / (1 + c * mu), size=21).astype(float)
    fp = fit_poisson(_window(vals))
    fn = fit_negbin(_window(vals))
    assert fn.converged
    assert fn.se_beta >= fp.se_beta
    assert fn.dispersion_c > 0


def test_negbin_matches_fixed_dispersion_oracle():
    rng = np.random.default_rng(4)
    vals = rng.negative_binomial(5, 0.1, size=21).astype(float)
    fit = fit_negbin(_window(vals))
    if fit.dispersion_c == 0:
        pytest.skip("degenerated to Poisson")
    res = minimize(
        _negbin_nll, [np.log(vals.mean()), 0.0], args=(vals, fit.dispersion_c), method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000},
    )
    assert fit.beta_hat == pytest.approx(res.x[1], abs=1e-5)


def test_growth_pvalue_none_when_not_converged():
    fit = fit_linear_log(_window([5.0, 6, 7, 8, 9, 10, 11]))
    assert growth_pvalue(fit) == fit.p_one_sided
    from dataclasses import replace

    assert growth_pvalue(replace(fit, converged=False)) is None


def test_rolling_fit_skips_short_history_and_rejects_rates():
    obs = {("R", "cases", 100 + d): float(5 + d) for d in range(30)}
    panel = StreamPanel(obs, {"cases": "count"})
    fs = rolling_fit(panel, "R", "cases", 7)
    assert min(fs.fits) == 106  # first date with 7 days of history
    assert len(fs.fits) == 24
    rate_panel = StreamPanel({("R", "pct", 100 + d): 1.0 for d in range(30)}, {"pct": "rate"})
    with pytest.raises(DataError):
        rolling_fit(rate_panel, "R", "pct", 7, model="poisson")


def test_fit_window_dispatch():
    vals = [4.0, 5, 6, 7, 9, 8, 11]
    for model in ("linear_log", "poisson", "negbin"):
        fit = fit_window(_window(vals), model)
        assert fit.model == model
    with pytest.raises(ValueError):
        fit_window(_window(vals), "probit")
