"""Pricing kernels, wildfire-stock risk aversion and the portfolio-share inversion."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import statsmodels.api as sm

from wildfire_rnd.core.enums import BinMode
from wildfire_rnd.core.errors import NumericError, ParameterError
from wildfire_rnd.core.models import DensityCurve
from wildfire_rnd.engine.panel_metrics import assign_bins, twoway_fe_fit

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-10
MIN_OVERLAP = 10
MATURITY_BINS = 10
MIN_MC_PATHS = 100_000
REGRESSOR = 'neg_log_price'


# ===== TYPES =====

@dataclass
class PricingKernelCurve:
    grid: np.ndarray
    values: np.ndarray
    log_moneyness: np.ndarray
    n_dropped: int = 0
    ticker: str = ""
    quote_date: int = 0
    maturity: float = 0.0

    def __post_init__(self):
        if np.any(self.values <= 0):
            raise NumericError("pricing kernel must be positive on its support")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'grid_k': self.grid, 'log_moneyness': self.log_moneyness,
                             'kernel': self.values, 'log_kernel': np.log(self.values)})


@dataclass
class RiskAversionEstimate:
    gamma_w: float
    se: float
    t_stat: float
    n_points: int
    method: str = "single"

    @property
    def puzzle(self) -> bool:
        return self.gamma_w < 0

    @property
    def puzzle_significant(self) -> bool:
        return bool(np.isfinite(self.t_stat) and self.t_stat < -1.96)

    def to_dict(self):
        return {'gamma_w': self.gamma_w, 'se': self.se, 't_stat': self.t_stat,
                'n_points': self.n_points, 'puzzle': self.puzzle,
                'puzzle_significant': self.puzzle_significant, 'method': self.method}


@dataclass
class PortfolioDecomposition:
    """Wealth shares and volatilities of the index and the wildfire-exposed stock.

    sigma_w is the idiosyncratic volatility of the stock; its total volatility
    is sqrt(beta^2 sigma^2 + sigma_w^2).
    """
    q: float
    q_w: float
    beta: float
    sigma: float
    sigma_w: float
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.sigma <= 0 or self.sigma_w <= 0:
            raise ParameterError("sigma and sigma_w must be > 0")

    @property
    def rho(self) -> float:
        return self.beta * self.sigma / np.sqrt(self.beta ** 2 * self.sigma ** 2 + self.sigma_w ** 2)

    @property
    def effective_exposure(self) -> float:
        return self.q_w + self.rho * self.sigma / self.sigma_w * self.q

    @property
    def projection_exposure(self) -> float:
        """Exposure that makes -gamma * exposure the regression slope of log W on log S^w"""
        total_var = self.beta ** 2 * self.sigma ** 2 + self.sigma_w ** 2
        return self.q_w + self.q * self.beta * self.sigma ** 2 / total_var

    def _require_gamma(self) -> float:
        if self.gamma is None:
            raise ParameterError("decomposition carries no gamma")
        return self.gamma

    @property
    def closed_form_slope(self) -> float:
        return -self.effective_exposure * self._require_gamma()

    @property
    def projection_slope(self) -> float:
        return -self.projection_exposure * self._require_gamma()

    def to_dict(self):
        return {'q': self.q, 'q_w': self.q_w, 'beta': self.beta, 'sigma': self.sigma,
                'sigma_w': self.sigma_w, 'gamma': self.gamma, 'rho': self.rho}


@dataclass
class PortfolioShare:
    q_w: float
    negative: bool


@dataclass
class Prop1Report:
    slope: float
    se: float
    ci_low: float
    ci_high: float
    closed_form_slope: float
    projection_slope: float
    n_paths: int
    block_slopes: List[float] = field(default_factory=list)

    @property
    def covers_projection(self) -> bool:
        return abs(self.slope - self.projection_slope) <= 3.0 * self.se + 1e-12

    @property
    def covers_closed_form(self) -> bool:
        return abs(self.slope - self.closed_form_slope) <= 3.0 * self.se + 1e-12

    def to_dict(self):
        return {'slope': self.slope, 'se': self.se, 'ci_low': self.ci_low, 'ci_high': self.ci_high,
                'closed_form_slope': self.closed_form_slope, 'projection_slope': self.projection_slope,
                'covers_closed_form': self.covers_closed_form,
                'covers_projection': self.covers_projection,
                'n_paths': self.n_paths, 'block_slopes': self.block_slopes}


# ===== KERNELS =====

def pricing_kernel(rnd: DensityCurve, phys: DensityCurve, rate: Optional[float] = None,
                   maturity: Optional[float] = None, floor: float = DENSITY_FLOOR) -> PricingKernelCurve:
    """e^{rT} f*/f on the grid points where both densities exceed ``floor``"""
    if rnd.grid.shape != phys.grid.shape or not np.allclose(rnd.grid, phys.grid, rtol=1e-12, atol=0.0):
        raise ParameterError("risk-neutral and physical densities must share a grid")
    rate = rnd.rate if rate is None else rate
    maturity = rnd.maturity if maturity is None else maturity
    keep = (rnd.values > floor) & (phys.values > floor) & rnd.supported
    n_keep = int(keep.sum())
    if n_keep < MIN_OVERLAP:
        raise NumericError(f"{rnd.ticker}: density supports overlap on {n_keep} points, need {MIN_OVERLAP}")
    grid = rnd.grid[keep]
    values = np.exp(rate * maturity) * rnd.values[keep] / phys.values[keep]
    dropped = int(rnd.grid.size - n_keep)
    if dropped:
        logger.debug(f"[KERNEL] {rnd.ticker}: {dropped} grid points outside the common support")
    return PricingKernelCurve(grid=grid, values=values, log_moneyness=np.log(grid / rnd.forward),
                              n_dropped=dropped, ticker=rnd.ticker, quote_date=rnd.quote_date,
                              maturity=maturity)


def _single_slice(kernel: PricingKernelCurve) -> RiskAversionEstimate:
    y = np.log(kernel.values)
    x = -np.log(kernel.grid)
    if np.ptp(x) == 0:
        raise ParameterError(f"regressor {REGRESSOR} has no variation")
    fit = sm.OLS(y, sm.add_constant(x, has_constant="add")).fit(cov_type="HC1")
    slope = float(fit.params[1])
    n = int(y.size)
    if n < 3:
        return RiskAversionEstimate(slope, float("nan"), float("nan"), n)
    se = float(fit.bse[1])
    t_stat = slope / se if se > 0 else (0.0 if slope == 0 else np.copysign(np.inf, slope))
    return RiskAversionEstimate(slope, se, t_stat, n)


def kernel_panel(kernels: Sequence[PricingKernelCurve], maturity_bins: int = MATURITY_BINS) -> pd.DataFrame:
    """Long panel of log kernels with maturity bins assigned by slice maturity quantile"""
    maturities = np.array([k.maturity for k in kernels])
    n_bins = min(maturity_bins, np.unique(maturities).size)
    bins = assign_bins(maturities, n_bins, BinMode.QUANTILE) if n_bins >= 2 else np.zeros(len(kernels), dtype=int)
    frames = [pd.DataFrame({'firm': k.ticker, 'date': k.quote_date, 'maturity': k.maturity,
                            'maturity_bin': int(b), 'log_kernel': np.log(k.values),
                            REGRESSOR: -np.log(k.grid)})
              for k, b in zip(kernels, bins)]
    return pd.concat(frames, ignore_index=True)


def estimate_gamma_w(kernels: Union[PricingKernelCurve, Sequence[PricingKernelCurve]],
                     pooled: bool = False, maturity_bins: int = MATURITY_BINS) -> RiskAversionEstimate:
    """Slope of e^{rT} log f*/f on -log S.

    One slice: OLS with an intercept and HC1 standard errors. Pooled:
    firm, date and maturity-bin effects with firm and date double clustering.
    """
    if isinstance(kernels, PricingKernelCurve):
        kernels = [kernels]
    kernels = list(kernels)
    if not kernels:
        raise ParameterError("no pricing kernels to regress")
    if not pooled:
        if len(kernels) != 1:
            raise ParameterError("several kernels need pooled=True")
        estimate = _single_slice(kernels[0])
    else:
        panel = kernel_panel(kernels, maturity_bins)
        result = twoway_fe_fit(panel, 'log_kernel', [REGRESSOR],
                               absorb_on=('firm', 'date', 'maturity_bin'))
        if REGRESSOR in result.dropped:
            raise ParameterError(f"regressor {REGRESSOR} is absorbed by the fixed effects")
        slope, se = float(result.coefs[REGRESSOR]), float(result.se[REGRESSOR])
        estimate = RiskAversionEstimate(slope, se, slope / se if se > 0 else float("nan"),
                                        result.n, method="pooled")
    logger.info(f"[KERNEL] gamma_w={estimate.gamma_w:.4f} (se {estimate.se:.4f}, n={estimate.n_points}, "
                f"{estimate.method})")
    return estimate


# ===== RISK AVERSION INVERSIONS =====

def gamma_from_gamma_w(gamma_w: float, exposure: Union[float, PortfolioDecomposition]) -> float:
    """gamma = gamma_w / (q_w + rho * sigma / sigma_w * q)"""
    denom = exposure.effective_exposure if isinstance(exposure, PortfolioDecomposition) else float(exposure)
    if denom == 0.0:
        raise NumericError("unidentified: zero effective exposure")
    return gamma_w / denom


def implied_portfolio_share(gamma_w: float, gamma: float, rho: float, sigma: float,
                            sigma_w: float, q: float) -> PortfolioShare:
    if gamma <= 0:
        raise ParameterError("gamma must be > 0")
    q_w = gamma_w / gamma - rho * sigma / sigma_w * q
    if q_w < 0:
        logger.debug(f"[KERNEL] implied wildfire-stock share {q_w:.4f} < 0")
    return PortfolioShare(q_w=q_w, negative=q_w < 0)


def merton_optimal_shares(mu: float, alpha: float, beta: float, sigma: float, sigma_w: float,
                          r: float, gamma: float):
    """Optimal (q, q_w) of a CRRA investor holding the index and the exposed stock"""
    if gamma <= 0 or sigma <= 0 or sigma_w <= 0:
        raise ParameterError("gamma, sigma and sigma_w must be > 0")
    q_w = (alpha + beta * mu - r) / (gamma * sigma_w ** 2)
    q = (mu - r) / (gamma * sigma ** 2) - q_w * beta
    return q, q_w


# ===== MONTE CARLO CHECK =====

def _prop1_block(decomp: PortfolioDecomposition, mu: float, alpha: float, r: float, T: float,
                 n: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    """Sufficient statistics (n, sx, sy, sxx, sxy, syy) of (log S^w_T, log zeta_T) for one block"""
    rng = np.random.default_rng(seed_seq)
    q, q_w, beta, sigma, sigma_w, gamma = (decomp.q, decomp.q_w, decomp.beta, decomp.sigma,
                                           decomp.sigma_w, decomp.gamma)
    b = np.sqrt(T) * rng.standard_normal(n)
    b_w = np.sqrt(T) * rng.standard_normal(n)
    load_b = q * sigma + q_w * beta * sigma
    load_w = q_w * sigma_w
    wealth_drift = r + q * (mu - r) + q_w * (alpha + beta * mu - r) - 0.5 * (load_b ** 2 + load_w ** 2)
    log_wealth = wealth_drift * T + load_b * b + load_w * b_w
    stock_drift = alpha + beta * mu - 0.5 * (beta ** 2 * sigma ** 2 + sigma_w ** 2)
    x = stock_drift * T + beta * sigma * b + sigma_w * b_w
    y = -gamma * log_wealth
    return np.array([n, x.sum(), y.sum(), x @ x, x @ y, y @ y])


def verify_prop1_mc(q: float, q_w: float, beta: float, sigma: float, sigma_w: float, mu: float,
                    alpha: float, r: float, gamma: float, T: float = 1.0, n_paths: int = 1_000_000,
                    seed: int = 0, n_blocks: int = 8, workers: int = 1) -> Prop1Report:
    """Regression slope of log W_T^-gamma on log S^w_T from simulated constant-share wealth.

    Blocks draw from spawned seed sequences so results do not depend on
    ``workers``. The report carries both the closed-form and the exact
    joint-normal projection slope.
    """
    if n_paths < MIN_MC_PATHS:
        raise ParameterError(f"n_paths must be >= {MIN_MC_PATHS}")
    decomp = PortfolioDecomposition(q=q, q_w=q_w, beta=beta, sigma=sigma, sigma_w=sigma_w, gamma=gamma)
    sizes = np.full(n_blocks, n_paths // n_blocks)
    sizes[: n_paths % n_blocks] += 1
    seeds = np.random.SeedSequence(seed).spawn(n_blocks)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        blocks = list(pool.map(lambda args: _prop1_block(decomp, mu, alpha, r, T, *args), zip(sizes, seeds)))

    def slope_of(s):
        n, sx, sy, sxx, sxy, syy = s
        vx = sxx - sx * sx / n
        return (sxy - sx * sy / n) / vx, vx

    total = np.sum(blocks, axis=0)
    n, sx, sy, sxx, sxy, syy = total
    slope, vx = slope_of(total)
    vy = syy - sy * sy / n
    rss = max(vy - slope ** 2 * vx, 0.0)
    se = float(np.sqrt(rss / (n - 2) / vx))
    report = Prop1Report(slope=float(slope), se=se, ci_low=float(slope - 1.96 * se),
                         ci_high=float(slope + 1.96 * se),
                         closed_form_slope=decomp.closed_form_slope,
                         projection_slope=decomp.projection_slope, n_paths=int(n),
                         block_slopes=[float(slope_of(s)[0]) for s in blocks])
    logger.info(f"[KERNEL] MC slope {report.slope:.5f} (se {se:.2e}); closed form "
                f"{report.closed_form_slope:.5f}, projection {report.projection_slope:.5f}")
    return report


def summarize_risk_aversion(gammas: Sequence[float], shares: Sequence[float] = ()) -> Dict[str, float]:
    """Mean and quartiles of implied gammas plus the fraction of shares inside [0, 1]"""
    values = pd.Series(np.asarray(gammas, dtype=float)).dropna()
    if values.empty:
        raise ParameterError("no risk-aversion estimates to summarize")
    summary = {'n': int(values.size), 'mean': float(values.mean()),
               'p25': float(values.quantile(0.25)), 'median': float(values.median()),
               'p75': float(values.quantile(0.75))}
    shares = np.asarray(shares, dtype=float)
    if shares.size:
        summary['share_in_unit_interval'] = float(np.mean((shares >= 0) & (shares <= 1)))
    return summary
