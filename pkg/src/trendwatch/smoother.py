"""Retrospective penalized smoother with weekday effects.

Model per series s (Poisson or Log-Normal), on a shared daily grid:

    log mu_{s,t} = theta_s + a_{s,wd(t)} + z_t

where z_t is the log latent burden shared across series, theta_1 = 0, and
each corrected series' weekday effects sum to zero (Sunday carries the
negative sum of Monday..Saturday). The objective is the summed negative
log-likelihoods plus lam * ||D3 z||_1 (or the squared L2 norm), penalizing
the third difference of the trend.

The penalty acts on the log-space trend by default, which keeps the
objective jointly convex; a "natural"-space variant (penalty on the trend
itself, no convexity guarantee) is available via ``penalty_space``.

Solver: alternate a damped-Newton block over (theta, weekday effects) with a
majorize-minimize trend block. The trend subproblem is a weighted trend
filter solved via its box-constrained dual by a banded interior-point method
(L1) or a direct sparse solve (L2), then polished to the exact active set;
every block backtracks on the true objective, so the objective trace is
non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solveh_banded
from scipy.special import gammaln

from .errors import DataError
from .localreg import corrected_log
from .panel import StreamPanel, fill_gaps, weekday_of

SUNDAY = 6  # weekday index carrying the negative sum
MIN_T = 21
ETA_CLIP = 60.0
H_FLOOR = 1e-9


@dataclass(frozen=True)
class SmoothConfig:
    lam: float
    penalty: str = "l1"  # "l1" | "l2"
    penalty_space: str = "log"  # "log" | "natural"
    max_iter: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.penalty not in ("l1", "l2"):
            raise ValueError(f"unknown penalty: {self.penalty}")
        if self.penalty_space not in ("log", "natural"):
            raise ValueError(f"unknown penalty space: {self.penalty_space}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class SmoothResult:
    dates: np.ndarray
    alpha: np.ndarray  # (S, 7), rows sum to 0
    theta: np.ndarray  # (S,), theta[0] = 0
    log_phi: np.ndarray  # (T,)
    corrected_xi: np.ndarray  # (S, T)
    sigma2: np.ndarray  # (S,), nan for poisson series
    objective_trace: list[float]
    converged: bool
    n_iter: int
    lam: float
    penalty: str
    models: tuple[str, ...]

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.log_phi)


def third_difference_matrix(T: int) -> sp.csr_matrix:
    """(T-3) x T sparse operator with stencil [-1, 3, -3, 1]."""
    if T < 4:
        raise ValueError("need at least 4 points for a third difference")
    rows = T - 3
    data = np.tile([-1.0, 3.0, -3.0, 1.0], rows)
    indices = (np.arange(rows)[:, None] + np.arange(4)[None, :]).ravel()
    indptr = np.arange(0, 4 * rows + 1, 4)
    return sp.csr_matrix((data, indices, indptr), shape=(rows, T))


def weekday_correct(dates: np.ndarray, values: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """xi_t = y_t * exp(-alpha_{wd(t)}); zeros stay zeros."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (7,):
        raise ValueError("alpha must be a 7-vector")
    if abs(alpha.sum()) > 1e-8:
        raise ValueError("weekday effects must sum to zero")
    wd = np.array([weekday_of(d) for d in dates])
    return np.asarray(values, dtype=float) * np.exp(-alpha[wd])


def growth_series(log_phi: np.ndarray) -> np.ndarray:
    """g_t = log phi_{t+1} - log phi_t."""
    log_phi = np.asarray(log_phi, dtype=float)
    if len(log_phi) < 2:
        raise ValueError("need at least 2 points for a growth series")
    return np.diff(log_phi)


def _moving_average_init(y: np.ndarray, half: int = 3) -> np.ndarray:
    """Centered 7-day moving average with edge shrinkage."""
    T = len(y)
    out = np.empty(T)
    for t in range(T):
        lo, hi = max(0, t - half), min(T, t + half + 1)
        out[t] = y[lo:hi].mean()
    return out


class _SeriesTerm:
    """Likelihood bookkeeping for one series."""

    def __init__(self, y: np.ndarray, model: str, correct_weekday: bool):
        if model not in ("poisson", "lognormal"):
            raise ValueError(f"unknown series model: {model}")
        self.y = np.asarray(y, dtype=float)
        if np.any(self.y < 0) or not np.all(np.isfinite(self.y)):
            raise DataError("series values must be finite and non-negative")
        self.model = model
        self.correct_weekday = correct_weekday
        self.sigma2 = 1.0
        if model == "lognormal":
            self.logy = corrected_log(self.y)
            self._const = 0.0
        else:
            self.logy = None
            self._const = float(gammaln(self.y + 1.0).sum())

    def nll(self, eta: np.ndarray) -> float:
        eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
        if self.model == "poisson":
            mu = np.exp(eta)
            return float((mu - self.y * eta).sum()) + self._const
        r = self.logy - eta
        T = len(eta)
        return float((r @ r) / (2.0 * self.sigma2) + 0.5 * T * np.log(2.0 * np.pi * self.sigma2))

    def grad_hess_eta(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
        if self.model == "poisson":
            mu = np.exp(eta)
            return mu - self.y, mu
        g = (eta - self.logy) / self.sigma2
        h = np.full_like(eta, 1.0 / self.sigma2)
        return g, h

    def update_sigma2(self, eta: np.ndarray) -> float:
        """MLE update; returns the relative change."""
        if self.model != "lognormal":
            return 0.0
        resid = self.logy - np.clip(eta, -ETA_CLIP, ETA_CLIP)
        new = max(float(np.mean(resid**2)), 1e-12)
        change = abs(new - self.sigma2) / max(self.sigma2, 1e-12)
        self.sigma2 = new
        return change


def _upper_banded(M: sp.spmatrix, bandwidth: int) -> np.ndarray:
    """Upper banded storage (scipy solveh_banded convention) of a symmetric band matrix."""
    n = M.shape[0]
    dia = M.todia()
    ab = np.zeros((bandwidth + 1, n))
    for offset, row in zip(dia.offsets, dia.data):
        if 0 <= offset <= bandwidth:
            ab[bandwidth - offset, :] = row
    return ab


class _TrendFilterL1:
    """min_u 0.5 (u-b)' H (u-b) + lam ||D u||_1 via its box-constrained dual.

    The dual is min_nu 0.5 nu' D H^-1 D' nu - nu' D b over |nu| <= lam, a
    banded QP solved by a log-barrier interior-point method (banded Newton
    steps); the primal is recovered as u = b - H^-1 D' nu. The dual vector is
    warm-started across calls. A final active-set polish makes inactive third
    differences exactly zero.
    """

    def __init__(self, D: sp.csr_matrix, lam: float):
        self.D = D.tocsr()
        self.lam = lam
        self.m = D.shape[0]
        self.nu = np.zeros(self.m)

    def solve(self, h: np.ndarray, b: np.ndarray, max_iter: int = 60) -> np.ndarray:
        D, lam, m = self.D, self.lam, self.m
        hinv = 1.0 / h
        M = (D.multiply(hinv) @ D.T).tocsc()  # bandwidth 3
        c = D @ b
        nu = np.clip(self.nu, -0.999 * lam, 0.999 * lam)
        t_bar = 1.0
        mu = 10.0

        def primal_dual(nu):
            u = b - hinv * (D.T @ nu)
            Du = D @ u
            p = 0.5 * float(((u - b) * h) @ (u - b)) + lam * float(np.abs(Du).sum())
            d = -0.5 * float(nu @ (M @ nu)) + float(c @ nu)
            return u, p, d

        def barrier(nu):
            slack_lo, slack_hi = lam - nu, lam + nu
            if np.any(slack_lo <= 0) or np.any(slack_hi <= 0):
                return np.inf
            quad = 0.5 * float(nu @ (M @ nu)) - float(c @ nu)
            return quad - (np.log(slack_lo).sum() + np.log(slack_hi).sum()) / t_bar

        u, p, d = primal_dual(nu)
        scale = abs(p) + 1.0
        for _ in range(max_iter):
            gap = p - d
            if gap < 1e-11 * scale:
                break
            t_bar = max(mu * 2.0 * m / max(gap, 1e-300), t_bar)
            d_lo, d_hi = 1.0 / (lam - nu), 1.0 / (lam + nu)
            grad = M @ nu - c + (d_lo - d_hi) / t_bar
            hess_diag = (d_lo**2 + d_hi**2) / t_bar
            ab = _upper_banded(M, 3)
            ab[3, :] += hess_diag
            try:
                step = -solveh_banded(ab, grad)
            except np.linalg.LinAlgError:
                break
            # stay strictly inside the box, then backtrack on the barrier
            ratio = np.max(np.concatenate([step / (lam - nu), -step / (lam + nu)]))
            s = min(1.0, 0.99 / ratio) if ratio > 0 else 1.0
            f0 = barrier(nu)
            accepted = False
            for _ in range(40):
                trial = nu + s * step
                if barrier(trial) <= f0 - 1e-14 * (abs(f0) + 1.0) + 1e-12:
                    nu = trial
                    accepted = True
                    break
                s /= 2.0
            if not accepted:
                break
            u, p, d = primal_dual(nu)
        self.nu = nu.copy()
        return self._polish(h, b, nu, u)

    def _polish(self, h: np.ndarray, b: np.ndarray, nu: np.ndarray, u_ip: np.ndarray) -> np.ndarray:
        """Exact solve on the active set implied by the dual solution.

        |nu_i| < lam means (D u)_i = 0 at the optimum; active rows keep their
        fixed-sign linear contribution. Kept only if it does not worsen the
        subproblem objective.
        """
        lam = self.lam
        active = np.abs(nu) > lam * (1.0 - 1e-7)
        rhs_u = h * b
        if active.any():
            rhs_u = rhs_u - lam * (self.D[active].T @ np.sign(nu[active]))
        if (~active).any():
            Dz = self.D[~active]
            K = sp.bmat([[sp.diags(h), Dz.T], [Dz, None]], format="csc")
            rhs = np.concatenate([rhs_u, np.zeros(Dz.shape[0])])
            try:
                sol = spla.spsolve(K, rhs)
            except RuntimeError:
                return u_ip
            u_pol = np.asarray(sol[: len(b)])
        else:
            u_pol = rhs_u / h

        def model_obj(u):
            diff = u - b
            return 0.5 * float(diff @ (h * diff)) + lam * float(np.abs(self.D @ u).sum())

        if np.all(np.isfinite(u_pol)) and model_obj(u_pol) <= model_obj(u_ip) + 1e-10:
            return u_pol
        return u_ip


class _Smoother:
    def __init__(
        self,
        dates: np.ndarray,
        Y: np.ndarray,
        config: SmoothConfig,
        models: Sequence[str],
        correct_weekday: Sequence[bool],
    ):
        self.dates = np.asarray(dates, dtype=int)
        self.Y = np.atleast_2d(np.asarray(Y, dtype=float))
        self.S, self.T = self.Y.shape
        if self.T < MIN_T:
            raise DataError(f"need at least {MIN_T} days, got {self.T}")
        if np.any(np.diff(self.dates) != 1):
            raise DataError("smoother requires a contiguous daily grid")
        self.config = config
        self.terms = [
            _SeriesTerm(self.Y[s], models[s], correct_weekday[s]) for s in range(self.S)
        ]
        self.wd = np.array([weekday_of(d) for d in self.dates])
        # weekday design: column j is 1 on weekday j, -1 on Sunday
        M = np.zeros((self.T, 6))
        for j in range(6):
            M[self.wd == j, j] = 1.0
        M[self.wd == SUNDAY, :] = -1.0
        self.wd_design = M
        self.D = third_difference_matrix(self.T)
        self.theta = np.zeros(self.S)
        self.a = np.zeros((self.S, 6))  # free weekday params, Sunday implied
        self.log_space = config.penalty_space == "log"
        init = np.log(_moving_average_init(self.Y[0]) + 0.5)
        self.u = init if self.log_space else np.exp(init)
        self._l1 = (
            _TrendFilterL1(self.D, config.lam) if config.penalty == "l1" else None
        )
        for term in self.terms:
            if term.model == "lognormal":
                term.sigma2 = max(float(np.var(term.logy)), 1e-6)

    # -- parameterization ---------------------------------------------------

    def _z(self, u: np.ndarray | None = None) -> np.ndarray:
        u = self.u if u is None else u
        return u if self.log_space else np.log(np.maximum(u, 1e-12))

    def _eta(self, s: int, u: np.ndarray | None = None) -> np.ndarray:
        z = self._z(u)
        eta = self.theta[s] + z
        if self.terms[s].correct_weekday:
            eta = eta + self.wd_design @ self.a[s]
        return eta

    def penalty_value(self, u: np.ndarray | None = None) -> float:
        u = self.u if u is None else u
        Du = self.D @ u
        if self.config.penalty == "l1":
            return self.config.lam * float(np.abs(Du).sum())
        return self.config.lam * float(Du @ Du)

    def objective(self, u: np.ndarray | None = None) -> float:
        total = self.penalty_value(u)
        for s, term in enumerate(self.terms):
            total += term.nll(self._eta(s, u))
        return total

    # -- blocks --------------------------------------------------------------

    def _weekday_block(self, s: int) -> None:
        """Damped Newton on (theta_s, a_s) for one series, trend fixed."""
        term = self.terms[s]
        cols = []
        if s > 0:
            cols.append(np.ones(self.T))
        if term.correct_weekday:
            cols.extend(self.wd_design.T)
        if not cols:
            return
        X = np.column_stack(cols)
        for _ in range(20):
            eta = self._eta(s)
            g, h = term.grad_hess_eta(eta)
            grad = X.T @ g
            if np.max(np.abs(grad)) < 1e-10 * (1.0 + abs(term.nll(eta))):
                break
            H = X.T @ (h[:, None] * X) + 1e-12 * np.eye(X.shape[1])
            try:
                delta = np.linalg.solve(H, -grad)
            except np.linalg.LinAlgError:
                break
            f0 = term.nll(eta)
            step = 1.0
            improved = False
            for _ in range(40):
                self._apply_delta(s, step * delta)
                f1 = term.nll(self._eta(s))
                if np.isfinite(f1) and f1 <= f0 + 1e-14 * (abs(f0) + 1.0):
                    improved = True
                    break
                self._apply_delta(s, -step * delta)
                step /= 2.0
            if not improved or np.max(np.abs(step * delta)) < 1e-13:
                break

    def _apply_delta(self, s: int, delta: np.ndarray) -> None:
        k = 0
        if s > 0:
            self.theta[s] += delta[0]
            k = 1
        if self.terms[s].correct_weekday:
            self.a[s] += delta[k:]

    def _trend_block(self) -> None:
        """Majorize-minimize step on the shared trend with backtracking."""
        u0 = self.u
        g = np.zeros(self.T)
        h = np.zeros(self.T)
        for s, term in enumerate(self.terms):
            gs, hs = term.grad_hess_eta(self._eta(s))
            if self.log_space:
                g += gs
                h += hs
            else:
                # d eta / d u = 1/u; Gauss-Newton-style positive curvature
                g += gs / u0
                h += np.maximum(hs - gs, H_FLOOR) / u0**2
        h = np.maximum(h, H_FLOOR)
        b = u0 - g / h
        if self.config.penalty == "l1":
            u_hat = self._l1.solve(h, b)
        else:
            M = sp.diags(h) + 2.0 * self.config.lam * (self.D.T @ self.D)
            u_hat = spla.spsolve(M.tocsc(), h * b)
        f0 = self.objective(u0)
        if self.objective(u_hat) <= f0 + 1e-12 * (abs(f0) + 1.0):
            self.u = u_hat
            return
        direction = u_hat - u0
        step = 0.5
        for _ in range(40):
            trial = u0 + step * direction
            if self.objective(trial) < f0:
                self.u = trial
                return
            step /= 2.0
        # no improving step: keep the current trend

    # -- driver ----------------------------------------------------------------

    def run(self) -> SmoothResult:
        cfg = self.config
        trace = [self.objective()]
        converged = False
        still = 0
        it = 0
        for it in range(1, cfg.max_iter + 1):
            for s in range(self.S):
                self._weekday_block(s)
            self._trend_block()
            sigma_change = 0.0
            for s, term in enumerate(self.terms):
                sigma_change = max(sigma_change, term.update_sigma2(self._eta(s)))
            f = self.objective()
            trace.append(f)
            prev = trace[-2]
            rel = abs(prev - f) / (abs(prev) + 1.0)
            if rel < cfg.tol and sigma_change < 1e-6:
                still += 1
                # require sustained stagnation: single small steps occur on
                # temporary plateaus while the active set is still moving
                if still >= 3:
                    converged = True
                    break
            else:
                still = 0
        alpha = np.zeros((self.S, 7))
        for s, term in enumerate(self.terms):
            if term.correct_weekday:
                alpha[s, :6] = self.a[s]
                alpha[s, SUNDAY] = -self.a[s].sum()
        xi = np.vstack(
            [weekday_correct(self.dates, self.Y[s], alpha[s]) for s in range(self.S)]
        )
        sigma2 = np.array(
            [t.sigma2 if t.model == "lognormal" else np.nan for t in self.terms]
        )
        return SmoothResult(
            dates=self.dates,
            alpha=alpha,
            theta=self.theta.copy(),
            log_phi=self._z().copy(),
            corrected_xi=xi,
            sigma2=sigma2,
            objective_trace=trace,
            converged=converged,
            n_iter=it,
            lam=cfg.lam,
            penalty=cfg.penalty,
            models=tuple(t.model for t in self.terms),
        )


def smooth_univariate(
    dates: np.ndarray,
    values: np.ndarray,
    config: SmoothConfig,
    model: str = "poisson",
    correct_weekday: bool = True,
) -> SmoothResult:
    """Penalized weekday-corrected smoothing of one daily series."""
    return _Smoother(dates, np.asarray(values)[None, :], config, [model], [correct_weekday]).run()


def smooth_multivariate(
    dates: np.ndarray,
    Y: np.ndarray,
    config: SmoothConfig,
    models: Sequence[str],
    correct_weekday: Sequence[bool] | bool = True,
) -> SmoothResult:
    """Joint smoothing of S >= 2 aligned series sharing one latent trend."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    S = Y.shape[0]
    if len(models) != S:
        raise ValueError("one model per series required")
    if isinstance(correct_weekday, bool):
        correct_weekday = [correct_weekday] * S
    return _Smoother(dates, Y, config, list(models), list(correct_weekday)).run()


def panel_matrix(
    panel: StreamPanel, region: str, streams: Sequence[str], gap_policy: str = "interpolate"
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned daily matrix for one region: intersects the streams' spans."""
    filled = []
    for stream in streams:
        dates, values = panel.series(region, stream)
        if len(dates) == 0:
            raise DataError(f"{region}/{stream}: no observations")
        d, v = fill_gaps(dates, values, gap_policy)
        filled.append((d, v))
    start = max(d[0] for d, _ in filled)
    end = min(d[-1] for d, _ in filled)
    if end < start:
        raise DataError(f"{region}: streams {list(streams)} have no common dates")
    grid = np.arange(start, end + 1)
    Y = np.vstack([v[np.searchsorted(d, start) : np.searchsorted(d, end) + 1] for d, v in filled])
    assert Y.shape[1] == len(grid)
    return grid, Y


def write_smooth_csv(result: SmoothResult, stream_ids: Sequence[str], path) -> None:
    """Export schema: date,log_phi,xi_<stream>... plus a JSON sidecar."""
    import csv
    import json

    from .panel import format_date

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "log_phi"] + [f"xi_{s}" for s in stream_ids])
        for t, d in enumerate(result.dates):
            writer.writerow(
                [format_date(d), repr(float(result.log_phi[t]))]
                + [repr(float(result.corrected_xi[s, t])) for s in range(len(stream_ids))]
            )
    sidecar = {
        "alpha": result.alpha.tolist(),
        "theta": result.theta.tolist(),
        "lambda": result.lam,
        "penalty": result.penalty,
        "models": list(result.models),
        "sigma2": [None if np.isnan(v) else v for v in result.sigma2],
        "objective_trace": result.objective_trace,
        "converged": result.converged,
        "n_iter": result.n_iter,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
