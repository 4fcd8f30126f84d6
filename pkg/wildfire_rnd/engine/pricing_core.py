"""Black-Scholes pricing, implied volatility, CRR lattices and de-Americanization."""
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr
from scipy.stats import norm

from wildfire_rnd.core.errors import OutOfBandError, ParameterError

logger = logging.getLogger(__name__)

VOL_LOW = 1e-6
VOL_HIGH = 10.0
DEFAULT_STEPS = 500


@dataclass
class BsInputs:
    forward: float
    strike: float
    rate: float
    maturity: float
    vol: float = 0.0
    is_call: bool = True

    def __post_init__(self):
        if self.forward <= 0 or self.strike <= 0:
            raise ParameterError("forward and strike must be > 0")
        if self.maturity <= 0:
            raise ParameterError("maturity must be > 0")
        if self.vol < 0:
            raise ParameterError("vol must be >= 0")

    @property
    def discount(self) -> float:
        return float(np.exp(-self.rate * self.maturity))


# ===== BLACK FORMULA =====

def black_price(forward, strike, rate, maturity, vol, is_call=True):
    """Discounted Black formula on the forward, vectorized over all arguments"""
    forward, strike, rate, maturity, vol, is_call = np.broadcast_arrays(
        np.asarray(forward, dtype=float), np.asarray(strike, dtype=float),
        np.asarray(rate, dtype=float), np.asarray(maturity, dtype=float),
        np.asarray(vol, dtype=float), np.asarray(is_call, dtype=bool))
    discount = np.exp(-rate * maturity)
    total_sd = vol * np.sqrt(maturity)
    live = total_sd > 0
    safe_sd = np.where(live, total_sd, 1.0)
    d1 = (np.log(forward / strike) + 0.5 * safe_sd ** 2) / safe_sd
    d2 = d1 - safe_sd
    call = discount * (forward * ndtr(d1) - strike * ndtr(d2))
    put = discount * (strike * ndtr(-d2) - forward * ndtr(-d1))
    call = np.where(live, call, discount * np.maximum(forward - strike, 0.0))
    put = np.where(live, put, discount * np.maximum(strike - forward, 0.0))
    out = np.where(is_call, call, put)
    return out if out.ndim else float(out)


def bs_vega(forward, strike, rate, maturity, vol):
    forward, strike, rate, maturity, vol = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (forward, strike, rate, maturity, vol)))
    total_sd = np.maximum(vol * np.sqrt(maturity), 1e-300)
    d1 = (np.log(forward / strike) + 0.5 * total_sd ** 2) / total_sd
    out = np.exp(-rate * maturity) * forward * norm.pdf(d1) * np.sqrt(maturity)
    return out if out.ndim else float(out)


def bs_price(inputs: BsInputs) -> float:
    return float(black_price(inputs.forward, inputs.strike, inputs.rate,
                             inputs.maturity, inputs.vol, inputs.is_call))


def static_band(forward, strike, rate, maturity, is_call):
    """Lower (discounted intrinsic) and upper (discounted forward or strike) price bounds"""
    discount = np.exp(-np.asarray(rate, dtype=float) * np.asarray(maturity, dtype=float))
    lower = np.where(is_call, discount * np.maximum(forward - strike, 0.0),
                     discount * np.maximum(strike - forward, 0.0))
    upper = np.where(is_call, discount * forward, discount * strike)
    return lower, upper


# ===== IMPLIED VOLATILITY =====

def implied_vol_array(prices, forward, strike, rate, maturity, is_call=True,
                      max_iter: int = 100):
    """Safeguarded Newton with bisection fallback on [VOL_LOW, VOL_HIGH].

    Returns (vols, status) where status is 0 when solved, -1 below the lower
    band, +1 above the upper band and +2 when the price needs a vol above the
    bracket. Vols are NaN wherever status is nonzero.
    """
    prices, forward, strike, rate, maturity, is_call = np.broadcast_arrays(
        np.asarray(prices, dtype=float), np.asarray(forward, dtype=float),
        np.asarray(strike, dtype=float), np.asarray(rate, dtype=float),
        np.asarray(maturity, dtype=float), np.asarray(is_call, dtype=bool))
    shape = prices.shape
    prices, forward, strike, rate, maturity, is_call = (
        a.ravel().copy() for a in (prices, forward, strike, rate, maturity, is_call))

    lower, upper = static_band(forward, strike, rate, maturity, is_call)
    band_tol = 1e-12 * forward
    status = np.zeros(prices.shape, dtype=int)
    status[prices < lower - band_tol] = -1
    status[prices > upper + band_tol] = 1

    lo = np.full(prices.shape, VOL_LOW)
    hi = np.full(prices.shape, VOL_HIGH)
    p_lo = black_price(forward, strike, rate, maturity, lo, is_call)
    p_hi = black_price(forward, strike, rate, maturity, hi, is_call)
    at_floor = (status == 0) & (prices <= p_lo)
    status[(status == 0) & (prices > p_hi)] = 2

    discount = np.exp(-rate * maturity)
    guess = np.sqrt(2.0 * np.pi / maturity) * np.abs(prices - lower) / (discount * forward)
    sigma = np.clip(guess, VOL_LOW * 10, VOL_HIGH / 2)
    active = (status == 0) & ~at_floor
    tol = 1e-13 * forward
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        s = sigma[idx]
        diff = black_price(forward[idx], strike[idx], rate[idx], maturity[idx], s, is_call[idx]) - prices[idx]
        converged = np.abs(diff) <= tol
        hi[idx] = np.where(diff > 0, s, hi[idx])
        lo[idx] = np.where(diff < 0, s, lo[idx])
        vega = bs_vega(forward[idx], strike[idx], rate[idx], maturity[idx], s)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = s - diff / vega
        bisect = 0.5 * (lo[idx] + hi[idx])
        inside = np.isfinite(newton) & (newton > lo[idx]) & (newton < hi[idx])
        step = np.where(inside, newton, bisect)
        collapsed = (hi[idx] - lo[idx]) <= 1e-15 * np.maximum(hi[idx], 1.0)
        sigma[idx] = np.where(converged, s, step)
        active[idx] = ~(converged | collapsed)

    sigma[at_floor] = VOL_LOW
    sigma[status != 0] = np.nan
    return sigma.reshape(shape), status.reshape(shape)


def implied_vol(price: float, inputs: BsInputs) -> float:
    """Invert bs_price for vol; inputs.vol is ignored"""
    vol, status = implied_vol_array(price, inputs.forward, inputs.strike, inputs.rate,
                                    inputs.maturity, inputs.is_call)
    status = int(status)
    if status != 0:
        lower, upper = static_band(inputs.forward, inputs.strike, inputs.rate,
                                   inputs.maturity, inputs.is_call)
        if status == -1:
            raise OutOfBandError("lower", price, float(lower))
        if status == 1:
            raise OutOfBandError("upper", price, float(upper))
        limit = bs_price(replace(inputs, vol=VOL_HIGH))
        raise OutOfBandError("vol bracket", price, limit)
    return float(vol)


# ===== LATTICES =====

def crr_price(inputs: BsInputs, n_steps: int = DEFAULT_STEPS, american: bool = False,
              spot: float = None, div_yield: float = 0.0) -> float:
    """Cox-Ross-Rubinstein lattice price with u = exp(vol * sqrt(dt))"""
    if n_steps < 1:
        raise ParameterError("n_steps must be >= 1")
    r, T, sigma, K = inputs.rate, inputs.maturity, inputs.vol, inputs.strike
    if spot is None:
        spot = inputs.forward * np.exp(-(r - div_yield) * T)
    dt = T / n_steps
    growth = np.exp((r - div_yield) * dt)
    disc = np.exp(-r * dt)
    if sigma * np.sqrt(dt) < 1e-12:
        # deterministic path: the lattice collapses onto the forward
        forward_payoff = (inputs.forward - K) if inputs.is_call else (K - inputs.forward)
        value = np.exp(-r * T) * max(forward_payoff, 0.0)
        if american:
            steps = spot * np.exp((r - div_yield) * dt * np.arange(n_steps + 1))
            payoff = steps - K if inputs.is_call else K - steps
            value = max(value, float(np.max(np.exp(-r * dt * np.arange(n_steps + 1)) * np.maximum(payoff, 0.0))))
        return float(value)
    u = np.exp(sigma * np.sqrt(dt))
    d = 1.0 / u
    p = (growth - d) / (u - d)
    sign = 1.0 if inputs.is_call else -1.0

    prices = spot * u ** np.arange(-n_steps, n_steps + 1, 2)
    values = np.maximum(sign * (prices - K), 0.0)
    for i in range(n_steps - 1, -1, -1):
        values = disc * (p * values[1:] + (1.0 - p) * values[:-1])
        if american:
            prices = spot * u ** np.arange(-i, i + 1, 2)
            values = np.maximum(values, sign * (prices - K))
    return float(values[0])


def de_americanize(american_price: float, inputs: BsInputs, n_steps: int = DEFAULT_STEPS,
                   div_yield: float = 0.0, spot: float = None) -> float:
    """European-equivalent price from an American quote.

    The lattice vol that reprices the American quote is fed back into the
    Black formula on the same forward.
    """
    def lattice(vol):
        return crr_price(replace(inputs, vol=vol), n_steps=n_steps, american=True,
                         spot=spot, div_yield=div_yield)

    tol = 1e-12 * inputs.forward
    p_lo, p_hi = lattice(VOL_LOW), lattice(VOL_HIGH)
    if american_price < p_lo - tol:
        raise OutOfBandError("lower", american_price, p_lo)
    if american_price > p_hi + tol:
        raise OutOfBandError("upper", american_price, p_hi)
    if american_price <= p_lo:
        vol = VOL_LOW
    elif american_price >= p_hi:
        vol = VOL_HIGH
    else:
        vol = brentq(lambda s: lattice(s) - american_price, VOL_LOW, VOL_HIGH,
                     xtol=1e-13, rtol=1e-13, maxiter=200)
    return bs_price(replace(inputs, vol=vol))
