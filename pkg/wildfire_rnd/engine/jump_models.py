"""Merton and Kou jump-diffusions: characteristic functions, Fourier pricing, calibration."""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import least_squares
from scipy.stats import poisson

from wildfire_rnd.core.enums import ModelKind
from wildfire_rnd.core.errors import CalibrationError, NumericError, ParameterError, PricingError
from wildfire_rnd.core.models import JumpModelParams, KouParams, MertonParams
from wildfire_rnd.engine.pricing_core import black_price, implied_vol_array

logger = logging.getLogger(__name__)

DAMPING = 1.5
TAIL_TOL = 1e-10
PANEL_WIDTH = 2.0
PANEL_NODES = 20
MAX_UPPER = 2.0 ** 14
INVALID_PENALTY = 1.0

CharFn = Callable[[np.ndarray], np.ndarray]

PARAM_NAMES = {
    ModelKind.MERTON: ('sigma', 'lambda_s', 'mu_s', 'sigma_s'),
    ModelKind.KOU: ('sigma', 'lambda', 'p_up', 'eta1', 'eta2'),
    ModelKind.FLAT: ('sigma',),
}

DEFAULT_BOUNDS = {
    ModelKind.MERTON: {'sigma': (1e-4, 3.0), 'lambda_s': (0.0, 5.0),
                       'mu_s': (-3.0, 3.0), 'sigma_s': (1e-4, 3.0)},
    ModelKind.KOU: {'sigma': (1e-4, 3.0), 'lambda': (0.0, 5.0), 'p_up': (0.0, 1.0),
                    'eta1': (1e-3, 50.0), 'eta2': (1.0001, 50.0)},
    ModelKind.FLAT: {'sigma': (1e-4, 3.0)},
}

DEFAULT_STARTS = {
    ModelKind.MERTON: (0.2, 0.5, -0.2, 0.2),
    ModelKind.KOU: (0.2, 0.5, 0.5, 3.0, 5.0),
    ModelKind.FLAT: (0.2,),
}


# ===== CHARACTERISTIC FUNCTIONS =====

def merton_cf(u, params: MertonParams, maturity: float):
    """Characteristic function of log(S_T / S_0) under the martingale drift"""
    u = np.asarray(u, dtype=complex)
    drift = params.rate - params.div_yield - params.lambda_s * params.kappa - 0.5 * params.sigma ** 2
    jump = np.exp(1j * u * params.mu_s - 0.5 * params.sigma_s ** 2 * u ** 2) - 1.0
    exponent = (1j * u * drift - 0.5 * params.sigma ** 2 * u ** 2 + params.lambda_s * jump) * maturity
    return np.exp(exponent)


def kou_cf(u, params: KouParams, maturity: float):
    """Double-exponential jumps: downward with rate eta1, upward with rate eta2"""
    u = np.asarray(u, dtype=complex)
    p, eta1, eta2 = params.p_up, params.eta1, params.eta2
    drift = params.rate - params.div_yield - params.lam * params.compensator - 0.5 * params.sigma ** 2
    jump = p * eta2 / (eta2 - 1j * u) + (1.0 - p) * eta1 / (eta1 + 1j * u) - 1.0
    exponent = (1j * u * drift - 0.5 * params.sigma ** 2 * u ** 2 + params.lam * jump) * maturity
    return np.exp(exponent)


def model_cf(params: JumpModelParams, maturity: float) -> CharFn:
    if isinstance(params, KouParams):
        return lambda u: kou_cf(u, params, maturity)
    return lambda u: merton_cf(u, params, maturity)


def damping_for(params: JumpModelParams) -> float:
    """Largest admissible damping up to the default; Kou needs alpha + 1 < eta2"""
    if isinstance(params, KouParams):
        return min(DAMPING, 0.5 * (params.eta2 - 1.0))
    return DAMPING


# ===== FOURIER PRICING =====

def _panels(upper: float):
    nodes, weights = leggauss(PANEL_NODES)
    n_panels = int(np.ceil(upper / PANEL_WIDTH))
    left = np.arange(n_panels) * PANEL_WIDTH
    half = 0.5 * PANEL_WIDTH
    u = (left[:, None] + half * (nodes[None, :] + 1.0)).ravel()
    w = np.tile(half * weights, n_panels)
    return u, w


def price_cf(cf: CharFn, strike, forward: float, rate: float, maturity: float,
             is_call=True, alpha: float = DAMPING, tol: float = TAIL_TOL):
    """Damped Fourier inversion of a log-price characteristic function.

    ``cf`` is the characteristic function of log(S_T / S_0); it is rebased
    onto the forward through cf(-i), so any martingale-corrected model works.
    The integral runs on Gauss-Legendre panels up to a cutoff doubled until
    the tail envelope falls below ``tol`` per unit forward.
    """
    if alpha <= 0:
        raise ParameterError("damping must be > 0")
    strikes = np.atleast_1d(np.asarray(strike, dtype=float))
    k = np.log(strikes / forward)
    log_growth = float(np.log(cf(np.array(-1j))).real)

    def psi(u):
        v = u - (alpha + 1.0) * 1j
        num = cf(v) * np.exp(-1j * v * log_growth)
        return num / (alpha ** 2 + alpha - u ** 2 + 1j * (2.0 * alpha + 1.0) * u)

    scale = float(np.max(np.exp(-alpha * k))) / np.pi
    upper = 32.0
    while True:
        tail = np.linspace(upper, 2.0 * upper, 65)
        bound = scale * float(np.max(np.abs(psi(tail)))) * upper
        if bound < tol:
            break
        upper *= 2.0
        if upper > MAX_UPPER:
            raise PricingError("Fourier tail did not decay", bound)

    u, w = _panels(upper)
    values = psi(u)
    calls = np.empty(strikes.shape)
    for i, ki in enumerate(k):
        calls[i] = np.exp(-alpha * ki) / np.pi * np.dot((np.exp(-1j * u * ki) * values).real, w)
    discount = np.exp(-rate * maturity)
    calls = discount * forward * calls
    is_call = np.broadcast_to(np.asarray(is_call, dtype=bool), strikes.shape)
    out = np.where(is_call, calls, calls - discount * (forward - strikes))
    return out if np.ndim(strike) else float(out[0])


def merton_series_price(params: MertonParams, strike, forward: float, maturity: float,
                        is_call=True, max_terms: int = 200):
    """Poisson mixture of Black prices; independent oracle for price_cf"""
    intensity = params.lambda_s * maturity
    jump_growth = params.mu_s + 0.5 * params.sigma_s ** 2
    base = forward * np.exp(-params.lambda_s * params.kappa * maturity)
    discount = np.exp(-params.rate * maturity)
    total = 0.0
    for n in range(max_terms):
        weight = poisson.pmf(n, intensity) if intensity > 0 else float(n == 0)
        forward_n = base * np.exp(n * jump_growth)
        vol_n = np.sqrt(params.sigma ** 2 + n * params.sigma_s ** 2 / maturity)
        total = total + weight * black_price(forward_n, strike, params.rate, maturity, vol_n, is_call)
        scale = discount * max(forward_n, float(np.max(strike)))
        if n > intensity and weight * scale < 1e-12:
            break
    return total


def price_model(params: JumpModelParams, strike, forward: float, maturity: float, is_call=True):
    return price_cf(model_cf(params, maturity), strike, forward, params.rate, maturity,
                    is_call=is_call, alpha=damping_for(params))


# ===== IMPLIED VOLATILITY SURFACES =====

@dataclass
class IvSurface:
    strikes: np.ndarray
    maturities: np.ndarray
    ivs: np.ndarray
    valid: np.ndarray

    @property
    def n_invalid(self) -> int:
        return int((~self.valid).sum())


def model_iv_surface(params: JumpModelParams, strikes, maturities, forward,
                     rate: Optional[float] = None) -> IvSurface:
    """Model prices inverted to Black vols; rows are maturities.

    ``forward`` is either one forward shared by every maturity or one per
    maturity. A given ``rate`` replaces the parameters' own rate for both
    the drift and the discounting. Out-of-the-money legs are inverted, and
    degenerate corners come back flagged invalid with NaN vols.
    """
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    maturities = np.atleast_1d(np.asarray(maturities, dtype=float))
    forwards = np.asarray(forward, dtype=float)
    if forwards.ndim and forwards.shape != maturities.shape:
        raise ParameterError("forward must be a scalar or one value per maturity")
    forwards = np.broadcast_to(forwards, maturities.shape)
    if np.any(~np.isfinite(forwards)) or np.any(forwards <= 0):
        raise ParameterError("forwards must be finite and > 0")
    if rate is not None:
        params = replace(params, rate=float(rate))
    ivs = np.full((maturities.size, strikes.size), np.nan)
    valid = np.zeros(ivs.shape, dtype=bool)
    for row, (T, F) in enumerate(zip(maturities, forwards)):
        otm_call = strikes >= F
        try:
            prices = price_model(params, strikes, float(F), T, is_call=otm_call)
        except PricingError as exc:
            logger.debug(f"[CALIBRATE] maturity {T:.4f} unpriceable: {exc}")
            continue
        vols, status = implied_vol_array(prices, F, strikes, params.rate, T, otm_call)
        ivs[row] = vols
        valid[row] = (status == 0) & np.isfinite(vols)
    return IvSurface(strikes, maturities, ivs, valid)



# ===== CALIBRATION =====

@dataclass
class CalibrationQuotes:
    """Observed vols on forward moneyness; pricing runs on a unit forward"""
    moneyness: np.ndarray
    maturities: np.ndarray
    ivs: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.moneyness = np.asarray(self.moneyness, dtype=float)
        self.maturities = np.asarray(self.maturities, dtype=float)
        self.ivs = np.asarray(self.ivs, dtype=float)
        if self.weights is None:
            self.weights = np.ones(self.ivs.shape)
        self.weights = np.asarray(self.weights, dtype=float)
        if not (self.moneyness.shape == self.maturities.shape == self.ivs.shape == self.weights.shape):
            raise ParameterError("calibration quote columns must be aligned")

    def __len__(self):
        return int(self.ivs.size)

    def subset(self, mask) -> "CalibrationQuotes":
        return CalibrationQuotes(self.moneyness[mask], self.maturities[mask],
                                 self.ivs[mask], self.weights[mask])


@dataclass
class CalibrationResult:
    params: JumpModelParams
    mse: float
    n_quotes: int
    converged: bool
    multistart_rank: int
    relative_mse: float = float("nan")
    n_invalid: int = 0
    history: List[float] = field(default_factory=list)
    starts: List[Dict] = field(default_factory=list)

    def to_table_row(self) -> Dict[str, float]:
        """Row named the way the calibration tables label it"""
        p = self.params
        row = {'volatility': p.sigma}
        if isinstance(p, KouParams):
            row.update({'jump_intensity': p.lam, 'p': p.p_up,
                        'mean_down_jump': -1.0 / p.eta1, 'mean_up_jump': 1.0 / p.eta2})
        else:
            row.update({'jump_intensity': p.lambda_s, 'mean_jump_magnitude': p.mu_s,
                        'sd_jump_magnitude': p.sigma_s})
        row.update({'mse': self.mse, 'relative_mse': self.relative_mse})
        return row

    def to_dict(self):
        return {'params': self.params.to_dict(), 'table': self.to_table_row(),
                'n_quotes': self.n_quotes, 'converged': self.converged,
                'multistart_rank': self.multistart_rank, 'n_invalid': self.n_invalid,
                'starts': self.starts}


def params_from_vector(kind: ModelKind, x: Sequence[float], rate: float = 0.0,
                       div_yield: float = 0.0) -> JumpModelParams:
    if kind is ModelKind.KOU:
        return KouParams(sigma=x[0], lam=x[1], p_up=x[2], eta1=x[3], eta2=x[4],
                         rate=rate, div_yield=div_yield)
    if kind is ModelKind.FLAT:
        return MertonParams(sigma=x[0], lambda_s=0.0, mu_s=0.0, sigma_s=0.0,
                            rate=rate, div_yield=div_yield)
    return MertonParams(sigma=x[0], lambda_s=x[1], mu_s=x[2], sigma_s=x[3],
                        rate=rate, div_yield=div_yield)


def _resolve_bounds(kind: ModelKind, bounds: Optional[Dict[str, Sequence[float]]]):
    names = PARAM_NAMES[kind]
    merged = dict(DEFAULT_BOUNDS[kind])
    for name, pair in (bounds or {}).items():
        if name not in names:
            raise ParameterError(f"unknown {kind.value} parameter {name!r}")
        merged[name] = tuple(pair)
    lb = np.array([float(merged[n][0]) for n in names])
    ub = np.array([float(merged[n][1]) for n in names])
    if np.any(~np.isfinite(lb)) or np.any(~np.isfinite(ub)) or np.any(lb > ub):
        raise ParameterError("calibration bounds must be finite with lower <= upper")
    return names, lb, ub


def _model_ivs(params: JumpModelParams, quotes: CalibrationQuotes):
    out = np.full(quotes.ivs.shape, np.nan)
    for T in np.unique(quotes.maturities):
        rows = quotes.maturities == T
        surface = model_iv_surface(params, quotes.moneyness[rows], [T], forward=1.0)
        out[rows] = np.where(surface.valid[0], surface.ivs[0], np.nan)
    return out


def iv_errors(params: JumpModelParams, quotes: CalibrationQuotes):
    model = _model_ivs(params, quotes)
    return model - quotes.ivs


def calibrate(model_kind: Union[ModelKind, str], quotes: CalibrationQuotes,
              bounds: Optional[Dict[str, Sequence[float]]] = None, n_starts: int = 10,
              seed: int = 0, rate: float = 0.0, div_yield: float = 0.0) -> CalibrationResult:
    """Multistart bounded least squares on implied-vol errors.

    Parameters whose lower and upper bounds coincide are held fixed. Quotes
    the model cannot invert are left out of the mse and charged a fixed
    penalty in the residual vector so the optimizer is pushed away from them.
    """
    kind = ModelKind(model_kind)
    names, lb, ub = _resolve_bounds(kind, bounds)
    if len(quotes) < len(names):
        raise ParameterError(f"{kind.value} needs at least {len(names)} quotes, got {len(quotes)}")
    free = lb < ub
    sqrt_w = np.sqrt(quotes.weights)
    history: List[float] = []
    best = {'loss': np.inf}

    def full_vector(x_free):
        x = lb.copy()
        x[free] = x_free
        return x

    def residuals(x_free):
        params = params_from_vector(kind, full_vector(x_free), rate, div_yield)
        err = iv_errors(params, quotes)
        res = np.where(np.isfinite(err), sqrt_w * err, sqrt_w * INVALID_PENALTY)
        loss = float(np.mean(res ** 2))
        if loss < best['loss']:
            best['loss'] = loss
        history.append(best['loss'])
        return res

    rng = np.random.default_rng(seed)
    starts = [np.clip(np.array(DEFAULT_STARTS[kind], dtype=float), lb, ub)]
    for _ in range(max(n_starts, 1) - 1):
        starts.append(lb + (ub - lb) * rng.uniform(0.05, 0.95, size=lb.size))

    diagnostics = []
    best_fit = None
    for rank, x0 in enumerate(starts):
        try:
            if free.any():
                fit = least_squares(residuals, x0[free], bounds=(lb[free], ub[free]), method="trf",
                                    x_scale="jac", xtol=1e-12, ftol=1e-14, gtol=1e-12,
                                    max_nfev=400 * int(free.sum()))
                x_best, fun, jac, status = full_vector(fit.x), fit.fun, fit.jac, fit.status
            else:
                x_best, fun, jac, status = lb.copy(), residuals(np.array([])), None, 1
        except (NumericError, ParameterError, FloatingPointError, ValueError) as exc:
            diagnostics.append({'start': rank, 'x0': x0.tolist(), 'error': str(exc)})
            logger.warning(f"[CALIBRATE] start {rank} failed: {exc}")
            continue
        cost = float(np.mean(fun ** 2))
        grad_norm = float(np.linalg.norm(2.0 * jac.T @ fun / fun.size)) if jac is not None else 0.0
        diagnostics.append({'start': rank, 'x0': x0.tolist(), 'x': x_best.tolist(),
                            'loss': cost, 'grad_norm': grad_norm, 'status': int(status)})
        if best_fit is None or cost < best_fit[1]:
            best_fit = (x_best, cost, grad_norm, status, rank)

    if best_fit is None:
        raise CalibrationError(f"all {len(starts)} {kind.value} starts failed", diagnostics)

    x_best, _, grad_norm, status, rank = best_fit
    params = params_from_vector(kind, x_best, rate, div_yield)
    err = iv_errors(params, quotes)
    ok = np.isfinite(err)
    if not ok.any():
        raise CalibrationError("best fit leaves no invertible quote", diagnostics)
    w = quotes.weights[ok]
    mse = float(np.sum(w * err[ok] ** 2) / np.sum(w))
    spread = float(np.sum((quotes.ivs[ok] - quotes.ivs[ok].mean()) ** 2))
    relative = float(np.sum(err[ok] ** 2) / spread) if spread > 0 else float("nan")
    converged = grad_norm <= 1e-5 or status in (2, 3, 4)
    logger.info(f"[CALIBRATE] {kind.value}: mse={mse:.3e} start={rank} converged={converged}")
    return CalibrationResult(params=params, mse=mse, n_quotes=int(ok.sum()), converged=converged,
                             multistart_rank=rank, relative_mse=relative,
                             n_invalid=int((~ok).sum()), history=history, starts=diagnostics)


def split_by_maturity(quotes: CalibrationQuotes) -> Tuple[CalibrationQuotes, CalibrationQuotes]:
    """Short and long halves at the median maturity (ties go short)"""
    median = float(np.median(quotes.maturities))
    short = quotes.maturities <= median
    return quotes.subset(short), quotes.subset(~short)
