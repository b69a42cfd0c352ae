"""Tests for the penalized weekday-corrected trend smoother."""

from __future__ import annotations

import json

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from trendwatch.errors import DataError
from trendwatch.panel import StreamPanel, parse_date
from trendwatch.smoother import (
    SmoothConfig,
    growth_series,
    panel_matrix,
    smooth_multivariate,
    smooth_univariate,
    third_difference_matrix,
    weekday_correct,
    write_smooth_csv,
)

START = parse_date("2021-01-01")


def _dates(T):
    return np.arange(START, START + T)


def _poisson_series(T, alpha, seed=7, level=5.0, rate=0.01):
    rng = np.random.default_rng(seed)
    dates = _dates(T)
    wd = (dates - 1) % 7
    log_mu = level + rate * np.arange(T) + alpha[wd]
    return dates, rng.poisson(np.exp(log_mu)).astype(float)


ALPHA = np.array([0.12, 0.2, 0.05, -0.03, -0.1, -0.14, -0.1])
ALPHA = ALPHA - ALPHA.mean()


def test_third_difference_stencil():
    D = third_difference_matrix(8).toarray()
    assert D.shape == (5, 8)
    z = np.arange(8.0) ** 2  # quadratic: third difference is exactly zero
    assert np.allclose(D @ z, 0.0)
    z3 = np.arange(8.0) ** 3
    assert np.allclose(D @ z3, 6.0)  # Delta^3 t^3 = 3! everywhere
    with pytest.raises(ValueError):
        third_difference_matrix(3)


def test_weekday_correct_basics():
    dates = _dates(14)
    y = np.ones(14)
    y[3] = 0.0
    xi = weekday_correct(dates, y, ALPHA)
    assert xi[3] == 0.0
    wd = (dates - 1) % 7
    assert np.allclose(xi, y * np.exp(-ALPHA[wd]))
    with pytest.raises(ValueError):
        weekday_correct(dates, y, np.ones(7))  # does not sum to zero
    with pytest.raises(ValueError):
        weekday_correct(dates, y, np.ones(6))


def test_growth_series_is_log_diff():
    lp = np.array([0.0, 0.1, 0.3])
    assert np.allclose(growth_series(lp), [0.1, 0.2])
    with pytest.raises(ValueError):
        growth_series(np.array([1.0]))


def test_config_validation():
    with pytest.raises(ValueError):
        SmoothConfig(lam=0.0)
    with pytest.raises(ValueError):
        SmoothConfig(lam=1.0, penalty="l3")
    with pytest.raises(ValueError):
        SmoothConfig(lam=1.0, penalty_space="exp")
    with pytest.raises(ValueError):
        SmoothConfig(lam=1.0, tol=-1.0)


def test_requires_contiguous_grid():
    dates = _dates(60)
    dates = np.delete(dates, 30)
    with pytest.raises(DataError):
        smooth_univariate(dates, np.ones(59) * 5, SmoothConfig(lam=10.0))


def test_alpha_rows_sum_to_zero():
    dates, y = _poisson_series(120, ALPHA)
    res = smooth_univariate(dates, y, SmoothConfig(lam=100.0))
    assert res.alpha.shape == (1, 7)
    assert abs(res.alpha[0].sum()) < 1e-10


def test_objective_trace_monotone():
    dates, y = _poisson_series(120, ALPHA)
    res = smooth_univariate(dates, y, SmoothConfig(lam=1000.0))
    trace = np.asarray(res.objective_trace)
    diffs = np.diff(trace)
    assert np.all(diffs <= 1e-8 * (np.abs(trace[:-1]) + 1.0))


def test_huge_lambda_gives_quadratic_log_trend():
    dates, y = _poisson_series(150, ALPHA, seed=3)
    res = smooth_univariate(dates, y, SmoothConfig(lam=1e8))
    D = third_difference_matrix(len(dates))
    assert np.max(np.abs(D @ res.log_phi)) < 1e-8


def test_penalty_limit_monotonicity():
    dates, y = _poisson_series(150, ALPHA, seed=11)
    norms = []
    for lam in (1e2, 1e4, 1e6, 1e8):
        res = smooth_univariate(dates, y, SmoothConfig(lam=lam))
        D = third_difference_matrix(len(dates))
        norms.append(float(np.abs(D @ res.log_phi).sum()))
    for a, b in zip(norms, norms[1:]):
        assert b <= a + 1e-8


def test_l2_matches_direct_solve_oracle():
    # Log-normal series without weekday effects: the trend subproblem is an
    # exactly solvable ridge system at the fitted noise variance.
    rng = np.random.default_rng(5)
    T = 50
    dates = _dates(T)
    log_mu = 3.0 + 0.02 * np.arange(T)
    y = np.exp(log_mu + rng.normal(0, 0.1, T))
    lam = 50.0
    res = smooth_univariate(
        dates, y, SmoothConfig(lam=lam, penalty="l2"), model="lognormal",
        correct_weekday=False,
    )
    assert res.converged
    sigma2 = float(res.sigma2[0])
    D = third_difference_matrix(T)
    x = np.log(y)  # all y > 0 so the corrected log is the plain log
    M = sp.eye(T) / sigma2 + 2.0 * lam * (D.T @ D)
    z_star = spla.spsolve(M.tocsc(), x / sigma2)
    assert np.max(np.abs(res.log_phi - z_star)) < 1e-6


def test_weekday_recovery():
    dates, y = _poisson_series(360, ALPHA, seed=1, level=5.5)
    res = smooth_univariate(dates, y, SmoothConfig(lam=1e4))
    mae = float(np.mean(np.abs(res.alpha[0] - ALPHA)))
    assert mae < 0.05


def test_multivariate_theta_recovery():
    rng = np.random.default_rng(9)
    T = 240
    dates = _dates(T)
    wd = (dates - 1) % 7
    z = 4.5 + 0.5 * np.sin(np.arange(T) / 60.0)
    theta_true = -0.7
    y1 = rng.poisson(np.exp(z + ALPHA[wd])).astype(float)
    y2 = rng.poisson(np.exp(theta_true + z + ALPHA[wd])).astype(float)
    res = smooth_multivariate(
        dates, np.vstack([y1, y2]), SmoothConfig(lam=1e4),
        models=["poisson", "poisson"],
    )
    assert res.theta[0] == 0.0
    assert res.theta[1] == pytest.approx(theta_true, abs=0.05)
    with pytest.raises(ValueError):
        smooth_multivariate(dates, np.vstack([y1, y2]), SmoothConfig(lam=1.0),
                            models=["poisson"])


def test_lognormal_sigma2_estimate():
    rng = np.random.default_rng(13)
    T = 300
    dates = _dates(T)
    sigma_true = 0.2
    y = np.exp(3.0 + rng.normal(0, sigma_true, T))
    res = smooth_univariate(
        dates, y, SmoothConfig(lam=1e6), model="lognormal", correct_weekday=False
    )
    assert float(res.sigma2[0]) == pytest.approx(sigma_true**2, rel=0.25)


def test_panel_matrix_aligns_streams():
    obs = {}
    for t in range(40):
        obs[("R1", "a", START + t)] = float(t + 1)
    for t in range(5, 50):
        obs[("R1", "b", START + t)] = float(2 * t + 1)
    panel = StreamPanel(observations=obs)
    grid, Y = panel_matrix(panel, "R1", ["a", "b"])
    assert grid[0] == START + 5 and grid[-1] == START + 39
    assert Y.shape == (2, 35)
    assert Y[0, 0] == 6.0 and Y[1, 0] == 11.0
    with pytest.raises(DataError):
        panel_matrix(panel, "R1", ["a", "missing"])


def test_write_smooth_csv_and_sidecar(tmp_path):
    dates, y = _poisson_series(60, ALPHA)
    res = smooth_univariate(dates, y, SmoothConfig(lam=100.0))
    path = tmp_path / "smooth.csv"
    write_smooth_csv(res, ["cases"], path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "date,log_phi,xi_cases"
    assert len(lines) == 61
    sidecar = json.loads((tmp_path / "smooth.csv.json").read_text())
    assert sidecar["penalty"] == "l1"
    assert len(sidecar["alpha"][0]) == 7
    assert sidecar["models"] == ["poisson"]
