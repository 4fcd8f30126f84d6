"""GARCH-Wildfire quasi-likelihood fits and Monte Carlo physical densities."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter
from scipy.stats import gaussian_kde
from statsmodels.tools.numdiff import approx_fprime, approx_hess3

from wildfire_rnd.core.enums import DensityKind, Regime
from wildfire_rnd.core.errors import ConvergenceError, DataError, NumericError, ParameterError
from wildfire_rnd.core.models import (DensityCurve, GarchWildfireParams, MarketGarchParams,
                                      ReturnSeries, TreatmentCalendar)

logger = logging.getLogger(__name__)

MIN_OBS = 250
MIN_PATHS = 10_000
VARIANCE_FLOOR = 1e-12
PENALTY = 1e6
TRADING_DAYS = 252.0
LOG_2PI = float(np.log(2.0 * np.pi))


# ===== RESULT TYPES =====

@dataclass
class MarketGarchFit:
    params: MarketGarchParams
    loglik: float
    loglik_start: float
    grad_norm: float
    n_obs: int
    se: Dict[str, float] = field(default_factory=dict)
    variance: Optional[np.ndarray] = None
    residuals: Optional[np.ndarray] = None

    def to_dict(self):
        return {'params': self.params.to_dict(), 'loglik': self.loglik,
                'loglik_start': self.loglik_start, 'grad_norm': self.grad_norm,
                'n_obs': self.n_obs, 'se': self.se}


@dataclass
class GarchWildfireFit:
    params: GarchWildfireParams
    loglik: float
    loglik_start: float
    grad_norm: float
    n_obs: int
    se: Dict[str, object] = field(default_factory=dict)
    unidentified: bool = False
    variance: Optional[np.ndarray] = None
    residuals: Optional[np.ndarray] = None

    def to_dict(self):
        return {'params': self.params.to_dict(), 'loglik': self.loglik,
                'loglik_start': self.loglik_start, 'grad_norm': self.grad_norm,
                'n_obs': self.n_obs, 'se': self.se, 'unidentified': self.unidentified}


@dataclass
class ForecastState:
    """Last filtered values on the forecast origin day"""
    price: float
    stock_variance: float
    stock_residual: float
    market_variance: float
    market_residual: float
    wildfire_history: np.ndarray = field(default_factory=lambda: np.zeros(1))


@dataclass
class HazardEstimate:
    probability: float
    n_treated: int
    n_days: int
    degenerate: bool = False


# ===== REPARAMETERIZATION =====

def _simplex(a: float, b: float):
    """Logistic map onto {zeta, xi >= 0, zeta + xi < 1}"""
    top = max(a, b, 0.0)
    ea, eb, e0 = np.exp(a - top), np.exp(b - top), np.exp(-top)
    total = e0 + ea + eb
    return ea / total, eb / total


def _simplex_inverse(zeta: float, xi: float):
    zeta, xi = max(zeta, 1e-8), max(xi, 1e-8)
    rest = max(1.0 - zeta - xi, 1e-8)
    return np.log(zeta / rest), np.log(xi / rest)


def _variance_path(intercepts: np.ndarray, zeta: float, initial: float) -> np.ndarray:
    """sigma2[0] = initial, sigma2[t] = intercepts[t] + zeta * sigma2[t-1]"""
    out = np.empty(intercepts.size)
    out[0] = initial
    if intercepts.size > 1:
        out[1:], _ = lfilter([1.0], [1.0, -zeta], intercepts[1:], zi=[zeta * initial])
    return out


def _gaussian_terms(resid: np.ndarray, variance: np.ndarray) -> np.ndarray:
    safe = np.maximum(variance, VARIANCE_FLOOR)
    return -0.5 * (LOG_2PI + np.log(safe) + resid ** 2 / safe)


def _lag_matrix(flags: np.ndarray, n_lags: int) -> np.ndarray:
    lags = np.zeros((flags.size, n_lags))
    for k in range(1, n_lags + 1):
        lags[k:, k - 1] = flags[:-k]
    return lags


def _check_series(x: np.ndarray, name: str):
    if x.size < MIN_OBS:
        raise DataError(f"{name}: need >= {MIN_OBS} observations, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{name}: non-finite returns")
    if np.std(x) <= 0:
        raise NumericError(f"{name}: zero return variance")


# ===== MARKET MODEL =====

def market_variance_path(params: MarketGarchParams, market_returns: np.ndarray,
                         initial: Optional[float] = None):
    """Conditional market variance and residuals, natural units"""
    resid = np.asarray(market_returns, dtype=float) - params.mu
    start = float(np.var(market_returns)) if initial is None else initial
    intercepts = np.empty(resid.size)
    intercepts[0] = 0.0
    intercepts[1:] = params.omega + params.xi * resid[:-1] ** 2
    return _variance_path(intercepts, params.zeta, start), resid


def _market_terms(natural: np.ndarray, x: np.ndarray) -> np.ndarray:
    mu, omega, zeta, xi = natural
    resid = x - mu
    intercepts = np.empty(x.size)
    intercepts[0] = 0.0
    intercepts[1:] = omega + xi * resid[:-1] ** 2
    return _gaussian_terms(resid, _variance_path(intercepts, zeta, float(np.var(x))))


def _optimize(objective, theta0: np.ndarray, grad_tol: float, max_iter: int, label: str):
    """BFGS on the mean negative log-likelihood with centered numerical gradients"""
    def jac(theta):
        return np.ravel(approx_fprime(theta, objective, centered=True))

    theta = theta0
    for _ in range(3):
        result = minimize(objective, theta, jac=jac, method="BFGS",
                          options={'gtol': grad_tol / 10.0, 'maxiter': max_iter})
        theta = result.x
        grad_norm = float(np.linalg.norm(jac(theta)))
        if grad_norm <= grad_tol:
            return theta, grad_norm
    raise ConvergenceError(f"{label} did not converge", best_params=theta, grad_norm=grad_norm)


def _sandwich(loglik_terms, natural: np.ndarray) -> np.ndarray:
    """Robust covariance H^-1 (S'S) H^-1 of the total log-likelihood"""
    scores = np.asarray(approx_fprime(natural, loglik_terms, centered=True))
    n_obs = loglik_terms(natural).size
    scores = scores.reshape(n_obs, natural.size)
    hessian = approx_hess3(natural, lambda p: float(np.sum(loglik_terms(p))))
    try:
        bread = np.linalg.inv(-hessian)
    except np.linalg.LinAlgError:
        bread = np.linalg.pinv(-hessian)
    cov = bread @ (scores.T @ scores) @ bread
    return 0.5 * (cov + cov.T)


def fit_market_garch(market_returns: np.ndarray, grad_tol: float = 1e-6,
                     max_iter: int = 500) -> MarketGarchFit:
    """Gaussian QMLE of the market GARCH(1,1), fit on standardized returns"""
    R = np.asarray(market_returns, dtype=float)
    _check_series(R, "market")
    scale = float(np.std(R))
    x = R / scale

    def natural_of(theta):
        zeta, xi = _simplex(theta[2], theta[3])
        return np.array([theta[0], np.exp(theta[1]), zeta, xi])

    def objective(theta):
        terms = _market_terms(natural_of(theta), x)
        return -float(np.mean(terms))

    a0, b0 = _simplex_inverse(0.85, 0.10)
    theta0 = np.array([float(np.mean(x)), np.log(0.05 * np.var(x)), a0, b0])
    start = -objective(theta0) * x.size
    theta, grad_norm = _optimize(objective, theta0, grad_tol, max_iter, "market GARCH")
    natural = natural_of(theta)
    loglik_x = float(np.sum(_market_terms(natural, x)))

    cov = _sandwich(lambda p: _market_terms(p, x), natural)
    units = np.array([scale, scale ** 2, 1.0, 1.0])
    se_values = np.sqrt(np.maximum(np.diag(cov), 0.0)) * units
    params = MarketGarchParams(mu=natural[0] * scale, omega=natural[1] * scale ** 2,
                               zeta=float(natural[2]), xi=float(natural[3]))
    variance, resid = market_variance_path(params, R)
    log_scale = x.size * np.log(scale)
    logger.info(f"[GARCH] market fit: zeta={params.zeta:.4f} xi={params.xi:.4f} grad={grad_norm:.2e}")
    return MarketGarchFit(params=params, loglik=loglik_x - log_scale, loglik_start=start - log_scale,
                          grad_norm=grad_norm, n_obs=int(x.size),
                          se=dict(zip(('mu', 'omega', 'zeta', 'xi'), se_values.tolist())),
                          variance=variance, residuals=resid)


# ===== GARCH-WILDFIRE MODEL =====

class _WildfireLikelihood:
    """Stock equation on standardized data given the market variance path"""

    def __init__(self, series: ReturnSeries, market_variance: np.ndarray, n_lags: int,
                 identified: bool):
        self.y_scale = float(np.std(series.log_returns))
        self.r_scale = float(np.std(series.market_returns))
        self.y = series.log_returns / self.y_scale
        self.r = series.market_returns / self.r_scale
        self.market_var = market_variance / self.r_scale ** 2
        self.lags = _lag_matrix(series.wildfire_flags, n_lags)
        self.n_lags = n_lags
        self.identified = identified
        self.initial = float(np.var(self.y))

    def split(self, natural: np.ndarray):
        L = self.n_lags
        alpha, beta = natural[0], natural[1]
        if self.identified:
            delta = natural[2:2 + L]
            omega, zeta, xi, rho = natural[2 + L:6 + L]
            gamma = natural[6 + L:6 + 2 * L]
        else:
            delta = np.zeros(L)
            omega, zeta, xi, rho = natural[2:6]
            gamma = np.zeros(L)
        return alpha, beta, delta, omega, zeta, xi, rho, gamma

    def terms(self, natural: np.ndarray, with_variance: bool = False):
        alpha, beta, delta, omega, zeta, xi, rho, gamma = self.split(natural)
        resid = self.y - alpha - beta * self.r - self.lags @ delta
        intercepts = omega + rho * self.market_var + self.lags @ gamma
        intercepts[1:] += xi * resid[:-1] ** 2
        variance = _variance_path(intercepts, zeta, self.initial)
        out = _gaussian_terms(resid, variance)
        if with_variance:
            return out, variance, resid
        return out

    def natural_of(self, theta: np.ndarray) -> np.ndarray:
        L = self.n_lags if self.identified else 0
        alpha, beta = theta[0], theta[1]
        delta = theta[2:2 + L]
        log_omega, a, b, rho = theta[2 + L:6 + L]
        gamma = theta[6 + L:6 + 2 * L]
        zeta, xi = _simplex(a, b)
        return np.concatenate([[alpha, beta], delta, [np.exp(log_omega), zeta, xi, rho], gamma])

    def objective(self, theta: np.ndarray) -> float:
        natural = self.natural_of(theta)
        terms, variance, _ = self.terms(natural, with_variance=True)
        shortfall = np.maximum(VARIANCE_FLOOR - variance, 0.0)
        if shortfall.any():
            return PENALTY * (1.0 + float(np.sum(shortfall)) / VARIANCE_FLOOR)
        return -float(np.mean(terms))

    def units(self) -> np.ndarray:
        L = self.n_lags if self.identified else 0
        ys, rs = self.y_scale, self.r_scale
        return np.concatenate([[ys, ys / rs], np.full(L, ys),
                               [ys ** 2, 1.0, 1.0, ys ** 2 / rs ** 2], np.full(L, ys ** 2)])


def fit_garch_wildfire(series: ReturnSeries, market: MarketGarchParams, n_lags: int = 1,
                       grad_tol: float = 1e-6, max_iter: int = 500) -> GarchWildfireFit:
    """Second-step QMLE of the stock equation with wildfire jumps in mean and variance"""
    _check_series(series.log_returns, series.ticker)
    if n_lags < 1:
        raise ParameterError("n_lags must be >= 1")
    identified = bool(np.any(series.wildfire_flags != 0))
    if not identified:
        logger.warning(f"[GARCH] {series.ticker}: no wildfire days, delta and gamma_vol unidentified")
    market_var, _ = market_variance_path(market, series.market_returns)
    model = _WildfireLikelihood(series, market_var, n_lags, identified)

    r_var = float(np.var(model.r))
    beta0 = float(np.cov(model.y, model.r, bias=True)[0, 1] / r_var)
    alpha0 = float(np.mean(model.y - beta0 * model.r))
    resid_var = float(np.var(model.y - alpha0 - beta0 * model.r))
    a0, b0 = _simplex_inverse(0.85, 0.08)
    L = n_lags if identified else 0
    theta0 = np.concatenate([[alpha0, beta0], np.zeros(L),
                             [np.log(0.05 * resid_var), a0, b0, 0.0], np.zeros(L)])
    start = -model.objective(theta0) * model.y.size
    theta, grad_norm = _optimize(model.objective, theta0, grad_tol, max_iter,
                                 f"{series.ticker} GARCH-Wildfire")
    natural = model.natural_of(theta)
    terms, variance, resid = model.terms(natural, with_variance=True)

    cov = _sandwich(model.terms, natural)
    units = model.units()
    estimates = natural * units
    se_values = np.sqrt(np.maximum(np.diag(cov), 0.0)) * units
    alpha, beta, delta, omega, zeta, xi, rho, gamma = model.split(estimates)
    s_alpha, s_beta, s_delta, s_omega, s_zeta, s_xi, s_rho, s_gamma = model.split(se_values)
    params = GarchWildfireParams(alpha=float(alpha), beta=float(beta), delta=delta,
                                 omega=float(omega), zeta=float(zeta), xi=float(xi),
                                 rho_vol=float(rho), gamma_vol=gamma)
    if not identified:
        s_delta = np.full(n_lags, np.nan)
        s_gamma = np.full(n_lags, np.nan)
    se = {'alpha': float(s_alpha), 'beta': float(s_beta), 'delta': np.asarray(s_delta).tolist(),
          'omega': float(s_omega), 'zeta': float(s_zeta), 'xi': float(s_xi),
          'rho_vol': float(s_rho), 'gamma_vol': np.asarray(s_gamma).tolist()}
    log_scale = model.y.size * np.log(model.y_scale)
    logger.info(f"[GARCH] {series.ticker}: delta={params.delta.tolist()} "
                f"gamma_vol={params.gamma_vol.tolist()} grad={grad_norm:.2e}")
    return GarchWildfireFit(params=params, loglik=float(np.sum(terms)) - log_scale,
                            loglik_start=start - log_scale, grad_norm=grad_norm,
                            n_obs=int(model.y.size), se=se, unidentified=not identified,
                            variance=variance * model.y_scale ** 2,
                            residuals=resid * model.y_scale)


def stock_variance_path(params: GarchWildfireParams, market: MarketGarchParams,
                        series: ReturnSeries):
    """Filtered stock variance and residuals in natural units"""
    market_var, market_resid = market_variance_path(market, series.market_returns)
    lags = _lag_matrix(series.wildfire_flags, params.n_lags)
    resid = series.log_returns - params.alpha - params.beta * series.market_returns - lags @ params.delta
    intercepts = params.omega + params.rho_vol * market_var + lags @ params.gamma_vol
    intercepts[1:] += params.xi * resid[:-1] ** 2
    variance = _variance_path(intercepts, params.zeta, float(np.var(series.log_returns)))
    return np.maximum(variance, VARIANCE_FLOOR), resid, market_var, market_resid


def filter_state(params: GarchWildfireParams, market: MarketGarchParams, series: ReturnSeries,
                 upto: int, price: float) -> ForecastState:
    """Forecast origin after observing day ``upto`` (inclusive)"""
    if not 0 <= upto < len(series):
        raise ParameterError(f"forecast origin {upto} outside the series")
    variance, resid, market_var, market_resid = stock_variance_path(params, market, series)
    L = params.n_lags
    history = np.zeros(L)
    for k in range(L):
        if upto - k >= 0:
            history[k] = series.wildfire_flags[upto - k]
    return ForecastState(price=price, stock_variance=float(variance[upto]),
                         stock_residual=float(resid[upto]), market_variance=float(market_var[upto]),
                         market_residual=float(market_resid[upto]), wildfire_history=history)


def regime_window(series: ReturnSeries, regime: Regime, event_index: Optional[int],
                  foresight_window: int = 250) -> ReturnSeries:
    """Sample used to fit each regime.

    myopic: returns before the event; foresight: the window starting at the
    event; stationary: the full sample. Without an event every regime uses
    the full sample.
    """
    regime = Regime(regime)
    if event_index is None or regime is Regime.STATIONARY:
        return series
    if regime is Regime.MYOPIC:
        return series.window(0, event_index)
    return series.window(event_index, event_index + foresight_window)


# ===== SIMULATION =====

def simulate_terminal_prices(params: GarchWildfireParams, market: MarketGarchParams,
                             state: ForecastState, horizon_days: int, n_paths: int,
                             hazard: float, seed: int = 0) -> np.ndarray:
    """Coupled market and stock recursions with Bernoulli wildfire arrivals"""
    if horizon_days < 1:
        raise ParameterError("horizon_days must be >= 1")
    if not 0.0 <= hazard <= 1.0:
        raise ParameterError(f"hazard must lie in [0, 1], got {hazard}")
    rng = np.random.default_rng(seed)
    L = params.n_lags
    history = np.tile(np.resize(np.asarray(state.wildfire_history, dtype=float), L), (n_paths, 1))
    m_var = np.full(n_paths, state.market_variance)
    m_res = np.full(n_paths, state.market_residual)
    s_var = np.full(n_paths, state.stock_variance)
    s_res = np.full(n_paths, state.stock_residual)
    log_price = np.full(n_paths, np.log(state.price))
    for _ in range(horizon_days):
        m_var = market.omega + market.zeta * m_var + market.xi * m_res ** 2
        m_res = np.sqrt(m_var) * rng.standard_normal(n_paths)
        market_return = market.mu + m_res
        s_var = (params.omega + params.zeta * s_var + params.xi * s_res ** 2
                 + params.rho_vol * m_var + history @ params.gamma_vol)
        s_var = np.maximum(s_var, VARIANCE_FLOOR)
        s_res = np.sqrt(s_var) * rng.standard_normal(n_paths)
        log_price += params.alpha + params.beta * market_return + history @ params.delta + s_res
        fires = (rng.random(n_paths) < hazard).astype(float)
        history = np.column_stack([fires, history[:, :-1]]) if L > 1 else fires[:, None]
    return np.exp(log_price)


def forecast_density(params: GarchWildfireParams, market: MarketGarchParams, state: ForecastState,
                     horizon_days: int, n_paths: int, regime: Regime, hazard: float,
                     grid: np.ndarray, seed: int = 0, maturity: Optional[float] = None,
                     discount: float = 1.0, forward: Optional[float] = None,
                     ticker: str = "") -> DensityCurve:
    """Physical density on the supplied grid by Gaussian KDE of simulated prices"""
    if n_paths < MIN_PATHS:
        raise ParameterError(f"n_paths must be >= {MIN_PATHS}")
    prices = simulate_terminal_prices(params, market, state, horizon_days, n_paths, hazard, seed)
    try:
        kde = gaussian_kde(prices, bw_method="silverman")
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"degenerate simulated prices: {exc}")
    grid = np.asarray(grid, dtype=float)
    values = np.maximum(kde(grid), 0.0)
    bandwidth = float(kde.factor * np.std(prices, ddof=1))
    logger.debug(f"[GARCH] {ticker} {Regime(regime).value}: horizon {horizon_days}d, "
                 f"bandwidth {bandwidth:.4g}")
    return DensityCurve(grid=grid, values=values,
                        maturity=horizon_days / TRADING_DAYS if maturity is None else maturity,
                        discount=discount, kind=DensityKind.PHYSICAL,
                        forward=state.price if forward is None else forward,
                        ticker=ticker, bandwidth=bandwidth)


def wildfire_hazard(calendar: Sequence[TreatmentCalendar], ticker: str) -> HazardEstimate:
    """Laplace-smoothed daily wildfire probability (k + 1) / (n + 2)"""
    days = [c for c in calendar if c.ticker == ticker]
    n = len(days)
    k = sum(1 for c in days if c.treated_now)
    if n == 0:
        logger.warning(f"[GARCH] {ticker}: no calendar days, hazard set to 0.5")
    return HazardEstimate(probability=(k + 1.0) / (n + 2.0), n_treated=k, n_days=n,
                          degenerate=n == 0)


def first_event_index(series: ReturnSeries) -> Optional[int]:
    hits = np.flatnonzero(series.wildfire_flags != 0)
    return int(hits[0]) if hits.size else None
