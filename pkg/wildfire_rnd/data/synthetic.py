"""Synthetic surfaces, panels and return series for tests and the bundled fixture."""
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from wildfire_rnd.core.errors import ParameterError
from wildfire_rnd.core.models import (DAYS_PER_YEAR, GarchWildfireParams, JumpModelParams,
                                      MarketGarchParams, MertonParams, OptionQuote, ReturnSeries,
                                      SurfaceSlice, TreatmentCalendar, to_day, to_iso)
from wildfire_rnd.engine.jump_models import price_model
from wildfire_rnd.engine.pricing_core import black_price

logger = logging.getLogger(__name__)

DEFAULT_START = "2017-09-01"
DEFAULT_MONEYNESS = np.round(np.arange(0.5, 1.6001, 0.025), 6)
DEFAULT_MATURITIES = (30.0 / DAYS_PER_YEAR, 91.0 / DAYS_PER_YEAR)

SurfaceModel = Union[JumpModelParams, float]


def synth_surface(model: SurfaceModel, strikes: Sequence[float], maturity: float, forward: float,
                  rate: float, ticker: str = "SYN", quote_date: Optional[int] = None,
                  div_yield: float = 0.0) -> SurfaceSlice:
    """Call prices from a flat Black vol (a float) or a jump model's Fourier price"""
    strikes = np.asarray(strikes, dtype=float)
    if maturity <= 0:
        raise ParameterError("maturity must be > 0")
    if isinstance(model, (int, float)):
        calls = black_price(forward, strikes, rate, maturity, float(model), True)
    else:
        calls = price_model(replace(model, rate=rate, div_yield=div_yield), strikes, forward, maturity)
    quote_date = to_day(DEFAULT_START) if quote_date is None else quote_date
    expiry = quote_date + max(1, int(round(maturity * DAYS_PER_YEAR)))
    return SurfaceSlice(ticker=ticker, quote_date=quote_date, expiry=expiry, maturity_years=maturity,
                        strikes=strikes, calls=np.atleast_1d(calls), forward=forward, rate=rate,
                        div_yield=div_yield)


@dataclass
class WindowTreatment:
    """The first ``n_treated`` firms are exposed on days [start, start + length)"""
    n_treated: int
    start: int
    length: int

    def treated(self, firm: int, day: int) -> bool:
        return firm < self.n_treated and self.start <= day < self.start + self.length


@dataclass
class SynthPanel:
    slices: List[SurfaceSlice]
    calendar: List[TreatmentCalendar]
    firms: List[str]
    dates: List[int]


def synth_panel(n_firms: int, n_days: int, treatment_rule: WindowTreatment, noise: float = 0.0,
                seed: int = 0, control: Optional[SurfaceModel] = None,
                treatment: Optional[SurfaceModel] = None,
                moneyness: Sequence[float] = DEFAULT_MONEYNESS,
                maturities: Sequence[float] = DEFAULT_MATURITIES, rate: float = 0.01,
                start: str = DEFAULT_START) -> SynthPanel:
    """Firm-day surfaces; treated firm-days are priced with ``treatment``, the rest with ``control``.

    ``noise`` is the relative standard deviation of independent price
    perturbations. Forwards differ by firm and drift by day.
    """
    if n_firms < 1 or n_days < 1:
        raise ParameterError("n_firms and n_days must be >= 1")
    control = MertonParams(sigma=0.25, lambda_s=0.3, mu_s=-0.3, sigma_s=0.2) if control is None else control
    treatment = control if treatment is None else treatment
    rng = np.random.default_rng(seed)
    first_day = to_day(start)
    firms = [f"F{i:03d}" for i in range(n_firms)]
    dates = [first_day + d for d in range(n_days)]
    levels = 40.0 + 80.0 * rng.random(n_firms)
    drift = rng.normal(0.0, 0.01, size=(n_firms, n_days)).cumsum(axis=1)

    slices, calendar = [], []
    for i, firm in enumerate(firms):
        for d, day in enumerate(dates):
            model = treatment if treatment_rule.treated(i, d) else control
            forward = float(levels[i] * np.exp(drift[i, d]))
            for T in maturities:
                s = synth_surface(model, forward * np.asarray(moneyness), T, forward, rate,
                                  ticker=firm, quote_date=day)
                if noise > 0:
                    s = s.with_calls(s.calls * (1.0 + noise * rng.standard_normal(s.calls.size)))
                slices.append(s)
        exposed = [treatment_rule.treated(i, d) for d in range(n_days)]
        hits = [d for d, e in enumerate(exposed) if e]
        for d, day in enumerate(dates):
            calendar.append(TreatmentCalendar(ticker=firm, date=day, treated_now=exposed[d],
                                              after_first=bool(hits) and d >= hits[0],
                                              after_last=bool(hits) and d >= hits[-1]))
    return SynthPanel(slices=slices, calendar=calendar, firms=firms, dates=dates)


# ===== RETURN SERIES =====

def simulate_market_garch(params: MarketGarchParams, n: int, seed: int = 0, burn: int = 500):
    """Market returns and conditional variances from the GARCH(1,1) recursion"""
    rng = np.random.default_rng(seed)
    total = n + burn
    var = np.empty(total)
    eps = np.empty(total)
    var[0] = params.omega / (1.0 - params.zeta - params.xi)
    eps[0] = np.sqrt(var[0]) * rng.standard_normal()
    shocks = rng.standard_normal(total)
    for t in range(1, total):
        var[t] = params.omega + params.zeta * var[t - 1] + params.xi * eps[t - 1] ** 2
        eps[t] = np.sqrt(var[t]) * shocks[t]
    return params.mu + eps[burn:], var[burn:]


def simulate_garch_wildfire(params: GarchWildfireParams, market: MarketGarchParams, n: int,
                            n_fires: int = 0, seed: int = 0, flags: Optional[np.ndarray] = None,
                            ticker: str = "SYN", start: str = DEFAULT_START) -> ReturnSeries:
    """Stock returns with wildfire jumps driven by lagged flags; flags drawn when not given"""
    rng = np.random.default_rng(seed)
    market_returns, market_var = simulate_market_garch(market, n, seed=int(rng.integers(2 ** 31)))
    if flags is None:
        flags = np.zeros(n)
        if n_fires:
            flags[rng.choice(np.arange(1, n - 1), size=n_fires, replace=False)] = 1.0
    flags = np.asarray(flags, dtype=float)
    L = params.n_lags
    lags = np.zeros((n, L))
    for k in range(1, L + 1):
        lags[k:, k - 1] = flags[:-k]
    jump_mean = lags @ params.delta
    jump_var = lags @ params.gamma_vol
    var = (params.omega + params.rho_vol * market_var.mean()) / (1.0 - params.zeta - params.xi)
    resid = 0.0
    shocks = rng.standard_normal(n)
    returns = np.empty(n)
    for t in range(n):
        if t:
            var = params.omega + params.zeta * var + params.xi * resid ** 2
            var += params.rho_vol * market_var[t] + jump_var[t]
        var = max(var, 1e-12)
        resid = np.sqrt(var) * shocks[t]
        returns[t] = params.alpha + params.beta * market_returns[t] + jump_mean[t] + resid
    first = to_day(start)
    return ReturnSeries(ticker=ticker, dates=np.arange(first, first + n), log_returns=returns,
                        wildfire_flags=flags, market_returns=market_returns)


# ===== BUNDLED FIXTURE =====

def _quotes_from_slice(s: SurfaceSlice, half_spread: float) -> List[OptionQuote]:
    quotes = []
    for K, C in zip(s.strikes, s.calls):
        is_call = K >= s.forward
        price = C if is_call else C - s.discount * (s.forward - K)
        price = max(price, 1e-4)
        quotes.append(OptionQuote(ticker=s.ticker, quote_date=s.quote_date, expiry=s.expiry,
                                  strike=float(K), is_call=bool(is_call),
                                  bid=max(price - half_spread, 0.0), ask=price + half_spread,
                                  forward=s.forward, rate=s.rate, div_yield=s.div_yield))
    return quotes


def write_synthetic_inputs(directory: Union[str, Path], n_firms: int = 6, n_days: int = 8,
                           n_history: int = 400, seed: int = 7) -> Path:
    """Quotes, exposures, fires, returns and a config that runs every stage end to end"""
    from wildfire_rnd.data.quotes_io import write_quotes

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rule = WindowTreatment(n_treated=n_firms // 2, start=n_days // 2, length=2)
    control = MertonParams(sigma=0.25, lambda_s=0.4, mu_s=-0.3, sigma_s=0.2)
    treated = MertonParams(sigma=0.25, lambda_s=0.4, mu_s=-0.8, sigma_s=0.3)
    panel = synth_panel(n_firms, n_days, rule, seed=seed, control=control, treatment=treated,
                        moneyness=np.round(np.arange(0.6, 1.5001, 0.05), 6))
    quotes = [q for s in panel.slices for q in _quotes_from_slice(s, half_spread=0.005)]
    write_quotes(quotes, str(out / "quotes.csv"))

    exposures = pd.DataFrame({
        'ticker': panel.firms, 'zip': ['95401' if i < rule.n_treated else '10001' for i in range(n_firms)],
        'share_estabs': 0.25, 'share_emp': 0.2, 'share_sales': 0.15,
    })
    exposures.to_csv(out / "exposures.csv", index=False)
    fire_start, fire_end = panel.dates[rule.start], panel.dates[rule.start + rule.length - 1]
    pd.DataFrame({'zip': ['95401', '00000'], 'start_date': [to_iso(fire_start)] * 2,
                  'end_date': [to_iso(fire_end)] * 2}).to_csv(out / "fires.csv", index=False)

    rng = np.random.default_rng(seed)
    market = MarketGarchParams(mu=3e-4, omega=2e-6, zeta=0.88, xi=0.08)
    first = panel.dates[-1] - n_history - 1
    frames = []
    for i, firm in enumerate(panel.firms):
        flags = np.zeros(n_history)
        if i < rule.n_treated:
            offset = fire_start - first
            flags[offset:offset + rule.length] = 1.0
        params = GarchWildfireParams(alpha=1e-4, beta=0.8, delta=[-0.02], omega=2e-6, zeta=0.85,
                                     xi=0.08, rho_vol=0.1, gamma_vol=[4e-5])
        series = simulate_garch_wildfire(params, market, n_history, flags=flags,
                                         seed=int(rng.integers(2 ** 31)), ticker=firm,
                                         start=to_iso(first))
        frames.append(pd.DataFrame({'ticker': firm, 'date': [to_iso(d) for d in series.dates],
                                    'log_return': series.log_returns,
                                    'market_return': series.market_returns}))
    pd.concat(frames).to_csv(out / "returns.csv", index=False, float_format="%.12g")

    config = {
        'paths': {'quotes': str(out / "quotes.csv"), 'exposures': str(out / "exposures.csv"),
                  'fires': str(out / "fires.csv"), 'returns': str(out / "returns.csv"),
                  'output_dir': str(out / "out")},
        'pricing': {'american': False},
        'garch': {'n_paths': 10000},
        'calibration': {'n_starts': 2},
        'panel': {'n_bins': 10, 'fwl_min_obs': 50, 'n_eval_points': 20},
        'seed': seed,
    }
    (out / "config.json").write_text(json.dumps(config, indent=2), encoding="utf-8")
    logger.info(f"[INGEST] synthetic inputs written to {out}")
    return out
