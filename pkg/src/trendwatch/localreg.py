"""Local-window growth rate fits.

Three models for a window of consecutive daily values y_1..y_n with time
index x = 1..n and log link log(mu_i) = alpha + i*beta:

* ``linear_log``  -- OLS on log(y): closed-form beta and Var(beta) = 12 s^2 / (n^3 - n)
* ``poisson``     -- Poisson likelihood maximized by IRLS
* ``negbin``      -- Negative Binomial at a plug-in dispersion c = 1/r

All models report a one-sided p-value against H0: beta <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import DataError, DegenerateDataError
from .panel import StreamPanel, Window, extract_window

MAX_IRLS_ITER = 50
SCORE_TOL = 1e-8
INTEGER_TOL = 1e-9


@dataclass(frozen=True)
class RegressionFit:
    model: str
    alpha_hat: float
    beta_hat: float
    se_beta: float
    z_score: float
    p_one_sided: float
    n: int
    dispersion_c: float = 0.0
    converged: bool = True
    iterations: int = 0


@dataclass
class FitSeries:
    """Per-date fits for one (region, stream), windows ending on each date."""

    region_id: str
    stream_id: str
    window_n: int
    fits: dict[int, RegressionFit] = field(default_factory=dict)
    skipped: dict[int, str] = field(default_factory=dict)

    @property
    def dates(self) -> list[int]:
        return sorted(self.fits)

    def beta_series(self) -> tuple[np.ndarray, np.ndarray]:
        dates = self.dates
        return np.asarray(dates, dtype=int), np.array([self.fits[d].beta_hat for d in dates])


def _zp_from(beta: float, se: float) -> tuple[float, float]:
    if se > 0:
        z = beta / se
    else:
        # noiseless window: the estimate is exact
        z = 0.0 if beta == 0 else np.inf * np.sign(beta)
    return z, float(norm.sf(z))


def corrected_log(values: np.ndarray) -> np.ndarray:
    """log(y), with y+0.5 applied to the whole window when any y is zero."""
    values = np.asarray(values, dtype=float)
    if np.any(values < 0):
        raise ValueError("negative values cannot be log-transformed")
    if np.any(values == 0):
        values = values + 0.5
    return np.log(values)


def fit_linear_log(window: Window) -> RegressionFit:
    """Closed-form OLS of log(y) on the day index.

    beta = 12/(n(n+1)(n-1)) * sum_i (i - (n+1)/2) * log(y_i), the centered,
    numerically stable form of the normal-equation solution. Summation uses
    fsum so a constant window gives beta = 0 exactly and reversing the window
    negates beta exactly.
    """
    import math

    y = window.values
    n = window.n
    logs = corrected_log(y)
    i = np.arange(1, n + 1, dtype=float)
    centered = i - (n + 1) / 2.0  # exact: multiples of 0.5
    beta = 12.0 / (n * (n + 1) * (n - 1)) * math.fsum(centered * logs)
    alpha = logs.mean() - beta * (n + 1) / 2.0
    resid = logs - (alpha + beta * i)
    sigma2 = float(resid @ resid) / (n - 2)
    se = float(np.sqrt(12.0 * sigma2 / (n**3 - n)))
    z, p = _zp_from(beta, se)
    return RegressionFit("linear_log", float(alpha), float(beta), se, z, p, n)


def _check_counts(y: np.ndarray) -> np.ndarray:
    rounded = np.round(y)
    if np.max(np.abs(y - rounded)) > INTEGER_TOL:
        raise DataError("count models require integer-valued observations")
    if np.all(rounded == 0):
        raise DegenerateDataError("all-zero window admits no growth-rate fit")
    return rounded


def _irls(y: np.ndarray, weight_fn, loglik_fn) -> tuple[float, float, float, bool, int]:
    """Generic IRLS with log link over the design [1, i].

    ``weight_fn(mu)`` gives the information weight per observation,
    ``loglik_fn(mu)`` the log-likelihood. Returns (alpha, beta, se_beta,
    converged, iterations); convergence means score inf-norm < 1e-8.
    """
    n = len(y)
    i = np.arange(1.0, n + 1.0)
    alpha, beta = float(np.log(y.mean() + 0.5)), 0.0
    converged = False
    iterations = 0
    for iterations in range(1, MAX_IRLS_ITER + 1):
        eta = np.clip(alpha + beta * i, -500, 500)
        mu = np.exp(eta)
        w = weight_fn(mu)
        # score under the log link: sum of w/mu * (y - mu) * x; for the
        # canonical weights this is sum((y - mu) * x / (1 + c*mu))
        score_terms = w / np.maximum(mu, 1e-300) * (y - mu)
        score = np.array([score_terms.sum(), (score_terms * i).sum()])
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
        s0, s1, si2 = w.sum(), (w * i).sum(), (w * i * i).sum()
        det = s0 * si2 - s1 * s1
        if det <= 0 or not np.isfinite(det):
            break
        dalpha = (si2 * score[0] - s1 * score[1]) / det
        dbeta = (-s1 * score[0] + s0 * score[1]) / det
        # damped Newton: halve until the likelihood does not decrease
        step = 1.0
        ll_cur = loglik_fn(mu)
        for _ in range(40):
            a_new, b_new = alpha + step * dalpha, beta + step * dbeta
            mu_new = np.exp(np.clip(a_new + b_new * i, -500, 500))
            ll_new = loglik_fn(mu_new)
            if np.isfinite(ll_new) and ll_new >= ll_cur - 1e-12 * (abs(ll_cur) + 1.0):
                break
            step /= 2.0
        alpha, beta = alpha + step * dalpha, beta + step * dbeta
    eta = np.clip(alpha + beta * i, -500, 500)
    mu = np.exp(eta)
    w = weight_fn(mu)
    s0, s1, si2 = w.sum(), (w * i).sum(), (w * i * i).sum()
    det = s0 * si2 - s1 * s1
    se = float(np.sqrt(s0 / det)) if det > 0 else np.nan
    return alpha, beta, se, converged, iterations


def fit_poisson(window: Window) -> RegressionFit:
    """Poisson MLE via IRLS; se from the inverse observed information."""
    y = _check_counts(window.values)

    def loglik(mu):
        return float(np.sum(y * np.log(np.maximum(mu, 1e-300)) - mu))

    alpha, beta, se, converged, iters = _irls(y, lambda mu: mu, loglik)
    z, p = _zp_from(beta, se)
    return RegressionFit(
        "poisson", alpha, beta, se, z, p, window.n, converged=converged, iterations=iters
    )


def estimate_dispersion(window: Window, mu: np.ndarray) -> float:
    """Plug-in moment estimate of c = 1/r from a Poisson mean curve.

    c_hat = [Var(y) - E(mu) + E^2(mu)] / E(mu^2) - 1, clamped at 0.
    """
    y = np.asarray(window.values, dtype=float)
    mu = np.asarray(mu, dtype=float)
    var_y = float(np.var(y, ddof=1))
    e_mu = float(np.mean(mu))
    e_mu2 = float(np.mean(mu**2))
    if e_mu2 <= 0:
        return 0.0
    c = (var_y - e_mu + e_mu**2) / e_mu2 - 1.0
    return max(c, 0.0)


def poisson_mean_curve(fit: RegressionFit, n: int) -> np.ndarray:
    i = np.arange(1.0, n + 1.0)
    return np.exp(fit.alpha_hat + fit.beta_hat * i)


def fit_negbin(window: Window) -> RegressionFit:
    """Negative Binomial fit at the plug-in dispersion.

    The information weight per observation is mu / (1 + c*mu), which recovers
    the Poisson fit exactly when c = 0 and widens the standard error when
    c > 0.
    """
    y = _check_counts(window.values)
    base = fit_poisson(window)
    c = estimate_dispersion(window, poisson_mean_curve(base, window.n))

    def loglik(mu):
        if c == 0:
            return float(np.sum(y * np.log(np.maximum(mu, 1e-300)) - mu))
        r = 1.0 / c
        mu = np.maximum(mu, 1e-300)
        return float(np.sum(y * np.log(mu / (r + mu)) - r * np.log1p(mu / r)))

    alpha, beta, se, converged, iters = _irls(y, lambda mu: mu / (1.0 + c * mu), loglik)
    z, p = _zp_from(beta, se)
    return RegressionFit(
        "negbin", alpha, beta, se, z, p, window.n, dispersion_c=c, converged=converged,
        iterations=iters,
    )


def growth_pvalue(fit: RegressionFit) -> float | None:
    """One-sided p against H0: beta <= 0; None when the fit did not converge."""
    if not fit.converged:
        return None
    return float(norm.sf(fit.z_score))


_MODEL_FITTERS = {
    "linear_log": fit_linear_log,
    "poisson": fit_poisson,
    "negbin": fit_negbin,
}


def fit_window(window: Window, model: str) -> RegressionFit:
    try:
        fitter = _MODEL_FITTERS[model]
    except KeyError:
        raise ValueError(f"unknown model: {model}") from None
    return fitter(window)


def rolling_fit(
    panel: StreamPanel,
    region: str,
    stream: str,
    window_n: int,
    model: str = "linear_log",
    gap_policy: str = "interpolate",
) -> FitSeries:
    """One fit per end date with sufficient trailing history."""
    if model in ("poisson", "negbin") and panel.stream_kind(stream) == "rate":
        raise DataError(f"model {model} requires counts; stream {stream} is a rate")
    dates, _ = panel.series(region, stream)
    series = FitSeries(region, stream, window_n)
    if len(dates) == 0:
        return series
    for end in range(int(dates[0]) + window_n - 1, int(dates[-1]) + 1):
        try:
            window = extract_window(panel, region, stream, end, window_n, gap_policy)
            series.fits[end] = fit_window(window, model)
        except (DataError, DegenerateDataError, ValueError) as exc:
            series.skipped[end] = str(exc)
    return series


def write_fit_series_csv(series_list: list[FitSeries], path) -> None:
    """Export schema: region_id,stream_id,date,model,beta,se,z,p,converged."""
    import csv

    from .panel import format_date

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "stream_id", "date", "model", "beta", "se", "z", "p", "converged"])
        for fs in series_list:
            for d in fs.dates:
                f = fs.fits[d]
                writer.writerow(
                    [fs.region_id, fs.stream_id, format_date(d), f.model,
                     repr(f.beta_hat), repr(f.se_beta), repr(f.z_score),
                     repr(f.p_one_sided), int(f.converged)]
                )
