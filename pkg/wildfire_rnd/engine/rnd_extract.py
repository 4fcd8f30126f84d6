"""Risk-neutral densities from call prices by constrained local polynomials."""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from wildfire_rnd.core.enums import DensityKind
from wildfire_rnd.core.errors import NumericError, ParameterError
from wildfire_rnd.core.models import DensityCurve, SurfaceSlice
from wildfire_rnd.engine.pricing_core import bs_vega, implied_vol_array
from wildfire_rnd.engine.surface_repair import RepairedSlice

logger = logging.getLogger(__name__)

DEGREE = 4
GRID_SIZE = 100
MIN_STRIKES = 5
MAX_WIDENINGS = 3
DEFAULT_MULTIPLIER = 0.5

SliceLike = Union[RepairedSlice, SurfaceSlice]


@dataclass
class CdfCurve:
    grid: np.ndarray
    values: np.ndarray


@dataclass
class RndMoments:
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    support: Tuple[float, float]
    degenerate: bool = False

    def to_dict(self):
        return {'mean': self.mean, 'variance': self.variance, 'skewness': self.skewness,
                'excess_kurtosis': self.excess_kurtosis, 'support': list(self.support),
                'degenerate': self.degenerate}


@dataclass
class IvSlopeDiagnostic:
    strikes: np.ndarray
    observed_slope: np.ndarray
    implied_slope: np.ndarray
    residual: np.ndarray

    @property
    def mean_abs_residual(self) -> float:
        return float(np.nanmean(np.abs(self.residual)))


def _as_slice(item: SliceLike) -> SurfaceSlice:
    return item.slice if isinstance(item, RepairedSlice) else item


def silverman_bandwidth(strikes: np.ndarray, multiplier: float = DEFAULT_MULTIPLIER) -> float:
    strikes = np.asarray(strikes, dtype=float)
    return 1.06 * float(np.std(strikes, ddof=1)) * strikes.size ** (-0.2) * multiplier


def strike_grid(slice_: SurfaceSlice, grid_size: int = GRID_SIZE) -> np.ndarray:
    return np.linspace(slice_.strikes[0], slice_.strikes[-1], grid_size)


def _local_fit(strikes: np.ndarray, calls: np.ndarray, grid: np.ndarray, bandwidth: float):
    """Gaussian-weighted degree-4 fits with the curvature coefficient kept >= 0.

    Returns first and second strike derivatives at each grid point plus a
    support mask. Each fit is done on z = (K_i - K) / h and rescaled.
    """
    n_grid = grid.size
    first = np.full(n_grid, np.nan)
    second = np.zeros(n_grid)
    supported = np.ones(n_grid, dtype=bool)
    powers = np.arange(DEGREE + 1)
    for j, K in enumerate(grid):
        h = bandwidth
        for attempt in range(MAX_WIDENINGS + 1):
            z = (strikes - K) / h
            w = np.exp(-0.5 * z ** 2)
            eff = w.sum() ** 2 / np.sum(w ** 2) if w.sum() > 0 else 0.0
            root_w = np.sqrt(w)
            design = root_w[:, None] * z[:, None] ** powers[None, :]
            sv = np.linalg.svd(design, compute_uv=False)
            if eff >= DEGREE + 1 and sv[-1] > 1e-12 * sv[0]:
                break
            h *= 2.0
        else:
            supported[j] = False
            continue
        target = root_w * calls
        coef = np.linalg.lstsq(design, target, rcond=None)[0]
        if coef[2] < 0:
            reduced = np.delete(design, 2, axis=1)
            coef = np.insert(np.linalg.lstsq(reduced, target, rcond=None)[0], 2, 0.0)
        first[j] = coef[1] / h
        second[j] = coef[2] / h ** 2
    return first, second, supported


def _cdf_from_slope(first: np.ndarray, growth: float) -> np.ndarray:
    cdf = 1.0 + growth * first
    if np.isnan(cdf).any():
        idx = np.flatnonzero(~np.isnan(cdf))
        cdf = np.interp(np.arange(cdf.size), idx, cdf[idx]) if idx.size else np.zeros_like(cdf)
    return np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))


def extract_rnd(item: SliceLike, bandwidth: Optional[float] = None,
                grid_size: int = GRID_SIZE,
                bandwidth_multiplier: float = DEFAULT_MULTIPLIER) -> DensityCurve:
    """Density e^{rT} * 2 * beta2 on an equally spaced strike grid"""
    slice_ = _as_slice(item)
    if slice_.strikes.size < MIN_STRIKES:
        raise ParameterError(f"{slice_.ticker}: need >= {MIN_STRIKES} strikes, got {slice_.strikes.size}")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(slice_.strikes, bandwidth_multiplier)
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be > 0, got {bandwidth}")
    grid = strike_grid(slice_, grid_size)
    first, second, supported = _local_fit(slice_.strikes, slice_.calls, grid, bandwidth)
    growth = 1.0 / slice_.discount
    values = np.where(supported, growth * 2.0 * second, 0.0)
    if not supported.all():
        logger.warning(f"[RND] {slice_.ticker} {slice_.expiry}: {int((~supported).sum())} "
                       f"unsupported grid points")
    curve = DensityCurve(grid=grid, values=values, maturity=slice_.maturity_years,
                         discount=slice_.discount, kind=DensityKind.RISK_NEUTRAL,
                         forward=slice_.forward, ticker=slice_.ticker,
                         quote_date=slice_.quote_date, expiry=slice_.expiry,
                         cdf=_cdf_from_slope(first, growth), supported=supported,
                         bandwidth=bandwidth)
    if not 0.8 <= curve.mass <= 1.05:
        logger.info(f"[RND] {slice_.ticker} {slice_.expiry}: mass {curve.mass:.3f} outside [0.8, 1.05]")
    return curve


def rnd_cdf(item: SliceLike, grid: Optional[np.ndarray] = None, bandwidth: Optional[float] = None,
            bandwidth_multiplier: float = DEFAULT_MULTIPLIER) -> CdfCurve:
    """F* = 1 + e^{rT} * beta1 from the same constrained local fit"""
    slice_ = _as_slice(item)
    if slice_.strikes.size < MIN_STRIKES:
        raise ParameterError(f"{slice_.ticker}: need >= {MIN_STRIKES} strikes")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(slice_.strikes, bandwidth_multiplier)
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be > 0, got {bandwidth}")
    grid = strike_grid(slice_) if grid is None else np.asarray(grid, dtype=float)
    first, _, _ = _local_fit(slice_.strikes, slice_.calls, grid, bandwidth)
    return CdfCurve(grid=grid, values=_cdf_from_slope(first, 1.0 / slice_.discount))


def rnd_moments(curve: DensityCurve) -> RndMoments:
    mass = curve.mass
    if mass <= 0.5:
        raise NumericError(f"density mass {mass:.3f} too small for moments")
    x, p = curve.grid, curve.values / mass
    mean = float(trapezoid(x * p, x))
    centered = x - mean
    variance = max(float(trapezoid(centered ** 2 * p, x)), 0.0)
    support = (float(x[0]), float(x[-1]))
    if variance <= 1e-14 * max(mean ** 2, 1.0):
        logger.warning(f"[RND] {curve.ticker}: degenerate density, moments undefined")
        return RndMoments(mean, 0.0, float("nan"), float("nan"), support, degenerate=True)
    skew = float(trapezoid(centered ** 3 * p, x)) / variance ** 1.5
    kurt = float(trapezoid(centered ** 4 * p, x)) / variance ** 2 - 3.0
    return RndMoments(mean, variance, skew, kurt, support)


def iv_slope_diagnostic(slice_: SurfaceSlice, density: DensityCurve,
                        cdf: Optional[CdfCurve] = None, vega_floor: float = 0.05) -> IvSlopeDiagnostic:
    """Observed smile slope against the slope implied by the estimated CDF.

    Implied slope: (-D (1 - F*) + D N(d2)) / vega, the chain rule through
    dIV/dC = 1/vega and dIV/dK|C = D N(d2)/vega. Strikes whose vega is below
    vega_floor * F * sqrt(T) carry NaN residuals.
    """
    K = slice_.strikes
    T, F, D, r = slice_.maturity_years, slice_.forward, slice_.discount, slice_.rate
    otm_call = K >= F
    prices = np.where(otm_call, slice_.calls, slice_.calls - D * (F - K))
    ivs, status = implied_vol_array(prices, F, K, r, T, otm_call)
    observed = np.gradient(ivs, K) if K.size >= 2 else np.zeros_like(K)
    if cdf is None:
        if density.cdf is None:
            raise ParameterError("density carries no CDF; pass one explicitly")
        cdf = CdfCurve(density.grid, density.cdf)
    f_star = np.interp(K, cdf.grid, cdf.values)
    vega = bs_vega(F, K, r, T, ivs)
    total_sd = ivs * np.sqrt(T)
    d2 = (np.log(F / K) - 0.5 * total_sd ** 2) / total_sd
    implied = (-D * (1.0 - f_star) + D * norm.cdf(d2)) / vega
    residual = observed - implied
    weak = (vega < vega_floor * F * np.sqrt(T)) | (status != 0)
    residual = np.where(weak, np.nan, residual)
    return IvSlopeDiagnostic(strikes=K, observed_slope=observed, implied_slope=implied, residual=residual)


def support_record(slice_: SurfaceSlice) -> dict:
    """Traded strike support of one slice on forward moneyness"""
    return {'ticker': slice_.ticker, 'date': slice_.quote_date, 'expiry': slice_.expiry,
            'maturity': slice_.maturity_years, 'n_strikes': int(slice_.strikes.size),
            'min_moneyness': float(slice_.strikes[0] / slice_.forward),
            'max_moneyness': float(slice_.strikes[-1] / slice_.forward)}


def covers_moneyness(slice_: SurfaceSlice, low: float = 0.5, high: float = 1.5) -> bool:
    m = slice_.moneyness
    return bool(m[0] <= low and m[-1] >= high)
