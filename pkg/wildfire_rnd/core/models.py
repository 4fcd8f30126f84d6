from dataclasses import dataclass, field, replace
from datetime import date
from typing import Dict, Optional, Union

import numpy as np
from scipy.integrate import trapezoid

from .enums import DensityKind, ExposureMeasure, ModelKind
from .errors import DataError, ParameterError

DAYS_PER_YEAR = 365.0


def to_day(iso: str) -> int:
    """ISO-8601 date string to an integer day count"""
    return date.fromisoformat(iso.strip()).toordinal()


def to_iso(day: int) -> str:
    return date.fromordinal(int(day)).isoformat()


def year_fraction(start_day: int, end_day: int) -> float:
    return (end_day - start_day) / DAYS_PER_YEAR


# ===== QUOTES AND SURFACES =====

@dataclass
class OptionQuote:
    ticker: str
    quote_date: int
    expiry: int
    strike: float
    is_call: bool
    bid: float
    ask: float
    forward: float
    rate: float
    div_yield: float
    iv_raw: Optional[float] = None

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    @property
    def maturity_years(self) -> float:
        return year_fraction(self.quote_date, self.expiry)

    def validate(self):
        """Raise DataError naming the first violated invariant"""
        for name in ('strike', 'bid', 'ask', 'forward', 'rate', 'div_yield'):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise DataError(f"{name} {value} is not finite")
        if self.iv_raw is not None and not np.isfinite(self.iv_raw):
            raise DataError(f"iv {self.iv_raw} is not finite")
        if self.bid < 0:
            raise DataError(f"bid {self.bid} < 0")
        if self.ask < self.bid:
            raise DataError(f"ask {self.ask} < bid {self.bid}")
        if self.strike <= 0:
            raise DataError(f"strike {self.strike} <= 0")
        if self.expiry <= self.quote_date:
            raise DataError("expiry not after quote_date")
        if self.forward <= 0:
            raise DataError(f"forward {self.forward} <= 0")

    def to_dict(self):
        return {
            'ticker': self.ticker,
            'quote_date': to_iso(self.quote_date),
            'expiry': to_iso(self.expiry),
            'strike': self.strike,
            'cp_flag': 'C' if self.is_call else 'P',
            'bid': self.bid,
            'ask': self.ask,
            'forward': self.forward,
            'rate': self.rate,
            'div_yield': self.div_yield,
            'iv': self.iv_raw,
        }

    @staticmethod
    def from_dict(data):
        iv = data.get('iv')
        flag = str(data['cp_flag']).strip().upper()
        if flag not in ('C', 'P'):
            raise DataError(f"cp_flag {data['cp_flag']!r} not C/P")
        return OptionQuote(
            ticker=str(data['ticker']),
            quote_date=to_day(data['quote_date']),
            expiry=to_day(data['expiry']),
            strike=float(data['strike']),
            is_call=flag == 'C',
            bid=float(data['bid']),
            ask=float(data['ask']),
            forward=float(data['forward']),
            rate=float(data['rate']),
            div_yield=float(data['div_yield']),
            iv_raw=None if iv in (None, '') else float(iv),
        )


@dataclass
class SurfaceSlice:
    ticker: str
    quote_date: int
    expiry: int
    maturity_years: float
    strikes: np.ndarray
    calls: np.ndarray
    forward: float
    rate: float
    div_yield: float = 0.0

    def __post_init__(self):
        self.strikes = np.asarray(self.strikes, dtype=float)
        self.calls = np.asarray(self.calls, dtype=float)
        if self.strikes.ndim != 1 or self.strikes.shape != self.calls.shape:
            raise DataError(f"{self.ticker}: strikes and calls must be aligned vectors")
        if not (np.all(np.isfinite(self.strikes)) and np.all(np.isfinite(self.calls))):
            raise DataError(f"{self.ticker}: strikes and calls must be finite")
        if self.strikes.size > 1 and np.any(np.diff(self.strikes) <= 0):
            raise DataError(f"{self.ticker}: strikes must be strictly ascending")
        if not self.maturity_years > 0:
            raise DataError(f"{self.ticker}: maturity_years must be > 0")
        if not (np.isfinite(self.forward) and self.forward > 0):
            raise DataError(f"{self.ticker}: forward must be > 0")

    @property
    def discount(self) -> float:
        return float(np.exp(-self.rate * self.maturity_years))

    @property
    def moneyness(self) -> np.ndarray:
        return self.strikes / self.forward

    @property
    def key(self):
        return (self.ticker, self.quote_date, self.expiry)

    def with_calls(self, calls: np.ndarray) -> "SurfaceSlice":
        return replace(self, calls=np.array(calls, dtype=float))

    def to_dict(self):
        return {
            'ticker': self.ticker,
            'quote_date': to_iso(self.quote_date),
            'expiry': to_iso(self.expiry),
            'maturity_years': self.maturity_years,
            'strikes': self.strikes.tolist(),
            'calls': self.calls.tolist(),
            'forward': self.forward,
            'rate': self.rate,
            'div_yield': self.div_yield,
        }

    @staticmethod
    def from_dict(data):
        return SurfaceSlice(
            ticker=data['ticker'],
            quote_date=to_day(data['quote_date']),
            expiry=to_day(data['expiry']),
            maturity_years=float(data['maturity_years']),
            strikes=np.asarray(data['strikes'], dtype=float),
            calls=np.asarray(data['calls'], dtype=float),
            forward=float(data['forward']),
            rate=float(data['rate']),
            div_yield=float(data.get('div_yield', 0.0)),
        )


# ===== EXPOSURE AND TREATMENT =====

@dataclass
class ExposureRecord:
    ticker: str
    zip: str
    share_estabs: float
    share_emp: float
    share_sales: float
    year: Optional[int] = None

    def share(self, measure: ExposureMeasure) -> float:
        return getattr(self, ExposureMeasure(measure).value)

    def shares(self) -> np.ndarray:
        return np.array([self.share(m) for m in ExposureMeasure])

    def validate(self):
        for measure in ExposureMeasure:
            name, value = measure.value, self.share(measure)
            if not (np.isfinite(value) and 0.0 <= value <= 1.0):
                raise DataError(f"{name} {value} outside [0, 1]")


@dataclass
class FireEvent:
    zip: str
    start_date: int
    end_date: int

    def validate(self):
        if self.end_date < self.start_date:
            raise DataError("end_date before start_date")

    def active_on(self, day: int) -> bool:
        return self.start_date <= day <= self.end_date


@dataclass
class TreatmentCalendar:
    ticker: str
    date: int
    treated_now: bool
    after_first: bool
    after_last: bool

    def to_dict(self):
        return {
            'ticker': self.ticker,
            'date': to_iso(self.date),
            'treated_now': int(self.treated_now),
            'after_first': int(self.after_first),
            'after_last': int(self.after_last),
        }

    @staticmethod
    def from_dict(data):
        return TreatmentCalendar(
            ticker=str(data['ticker']),
            date=to_day(data['date']),
            treated_now=bool(int(data['treated_now'])),
            after_first=bool(int(data['after_first'])),
            after_last=bool(int(data['after_last'])),
        )


# ===== DENSITIES =====

@dataclass
class DensityCurve:
    grid: np.ndarray
    values: np.ndarray
    maturity: float
    discount: float
    kind: DensityKind
    forward: float
    ticker: str = ""
    quote_date: int = 0
    expiry: int = 0
    cdf: Optional[np.ndarray] = None
    supported: Optional[np.ndarray] = None
    bandwidth: float = float("nan")

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape:
            raise ParameterError("density grid and values must be aligned")
        steps = np.diff(self.grid)
        if steps.size and (np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0)):
            raise ParameterError("density grid must be ascending and equally spaced")
        if np.any(self.values < 0):
            raise ParameterError("density values must be nonnegative")
        if self.supported is None:
            self.supported = np.ones(self.grid.shape, dtype=bool)

    @property
    def mass(self) -> float:
        return float(trapezoid(self.values, self.grid))

    @property
    def moneyness(self) -> np.ndarray:
        return self.grid / self.forward

    @property
    def rate(self) -> float:
        return float(-np.log(self.discount) / self.maturity)


# ===== JUMP MODELS =====

@dataclass
class MertonParams:
    sigma: float
    lambda_s: float
    mu_s: float
    sigma_s: float
    rate: float = 0.0
    div_yield: float = 0.0

    def __post_init__(self):
        if self.sigma < 0 or self.sigma_s < 0:
            raise ParameterError("sigma and sigma_s must be >= 0")
        if self.lambda_s < 0:
            raise ParameterError("lambda_s must be >= 0")

    @property
    def kind(self) -> ModelKind:
        return ModelKind.MERTON

    @property
    def kappa(self) -> float:
        return float(np.expm1(self.mu_s + 0.5 * self.sigma_s ** 2))

    def to_dict(self):
        return {'model': self.kind.value, 'sigma': self.sigma, 'lambda_s': self.lambda_s,
                'mu_s': self.mu_s, 'sigma_s': self.sigma_s,
                'rate': self.rate, 'div_yield': self.div_yield}


@dataclass
class KouParams:
    sigma: float
    lam: float
    p_up: float
    eta1: float
    eta2: float
    rate: float = 0.0
    div_yield: float = 0.0

    def __post_init__(self):
        if self.sigma < 0 or self.lam < 0:
            raise ParameterError("sigma and lambda must be >= 0")
        if not 0.0 <= self.p_up <= 1.0:
            raise ParameterError("p_up must lie in [0, 1]")
        if self.eta1 <= 0:
            raise ParameterError("eta1 must be > 0")
        if self.eta2 <= 1:
            raise ParameterError("eta2 must be > 1 for a finite expected up-jump")

    @property
    def kind(self) -> ModelKind:
        return ModelKind.KOU

    @property
    def compensator(self) -> float:
        p, e1, e2 = self.p_up, self.eta1, self.eta2
        return p * e2 / (e2 - 1.0) + (1.0 - p) * e1 / (e1 + 1.0) - 1.0

    def to_dict(self):
        return {'model': self.kind.value, 'sigma': self.sigma, 'lambda': self.lam,
                'p_up': self.p_up, 'eta1': self.eta1, 'eta2': self.eta2,
                'rate': self.rate, 'div_yield': self.div_yield}


JumpModelParams = Union[MertonParams, KouParams]


def jump_params_from_dict(data) -> JumpModelParams:
    model = ModelKind(data['model'])
    common = {'rate': float(data.get('rate', 0.0)), 'div_yield': float(data.get('div_yield', 0.0))}
    if model is ModelKind.KOU:
        return KouParams(sigma=float(data['sigma']), lam=float(data['lambda']),
                         p_up=float(data['p_up']), eta1=float(data['eta1']),
                         eta2=float(data['eta2']), **common)
    return MertonParams(sigma=float(data['sigma']), lambda_s=float(data.get('lambda_s', 0.0)),
                        mu_s=float(data.get('mu_s', 0.0)), sigma_s=float(data.get('sigma_s', 0.0)),
                        **common)


# ===== RETURN PROCESSES =====

@dataclass
class MarketGarchParams:
    mu: float
    omega: float
    zeta: float
    xi: float

    def __post_init__(self):
        if self.omega <= 0:
            raise ParameterError("omega must be > 0")
        if self.zeta < 0 or self.xi < 0 or self.zeta + self.xi >= 1:
            raise ParameterError("need zeta, xi >= 0 and zeta + xi < 1")

    def to_dict(self):
        return {'mu': self.mu, 'omega': self.omega, 'zeta': self.zeta, 'xi': self.xi}

    @staticmethod
    def from_dict(data):
        return MarketGarchParams(mu=float(data['mu']), omega=float(data['omega']),
                                 zeta=float(data['zeta']), xi=float(data['xi']))


@dataclass
class GarchWildfireParams:
    alpha: float
    beta: float
    delta: np.ndarray
    omega: float
    zeta: float
    xi: float
    rho_vol: float
    gamma_vol: np.ndarray

    def __post_init__(self):
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        self.gamma_vol = np.atleast_1d(np.asarray(self.gamma_vol, dtype=float))
        if self.delta.shape != self.gamma_vol.shape:
            raise ParameterError("delta and gamma_vol need one entry per wildfire lag")
        if self.omega <= 0:
            raise ParameterError("omega must be > 0")
        if self.zeta < 0 or self.xi < 0 or self.zeta + self.xi >= 1:
            raise ParameterError("need zeta, xi >= 0 and zeta + xi < 1")

    @property
    def n_lags(self) -> int:
        return int(self.delta.size)

    def to_dict(self):
        return {'alpha': self.alpha, 'beta': self.beta, 'delta': self.delta.tolist(),
                'omega': self.omega, 'zeta': self.zeta, 'xi': self.xi,
                'rho_vol': self.rho_vol, 'gamma_vol': self.gamma_vol.tolist(),
                'n_lags': self.n_lags}

    @staticmethod
    def from_dict(data):
        return GarchWildfireParams(
            alpha=float(data['alpha']), beta=float(data['beta']),
            delta=np.asarray(data['delta'], dtype=float), omega=float(data['omega']),
            zeta=float(data['zeta']), xi=float(data['xi']), rho_vol=float(data['rho_vol']),
            gamma_vol=np.asarray(data['gamma_vol'], dtype=float))


@dataclass
class ReturnSeries:
    ticker: str
    dates: np.ndarray
    log_returns: np.ndarray
    wildfire_flags: np.ndarray
    market_returns: np.ndarray

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype=np.int64)
        self.log_returns = np.asarray(self.log_returns, dtype=float)
        self.wildfire_flags = np.asarray(self.wildfire_flags, dtype=float)
        self.market_returns = np.asarray(self.market_returns, dtype=float)
        n = self.log_returns.size
        if not (self.dates.size == self.wildfire_flags.size == self.market_returns.size == n):
            raise DataError(f"{self.ticker}: return series columns are not aligned")
        if not (np.all(np.isfinite(self.log_returns)) and np.all(np.isfinite(self.market_returns))):
            raise DataError(f"{self.ticker}: missing values inside the return series")

    def __len__(self):
        return int(self.log_returns.size)

    def window(self, start: int, stop: int) -> "ReturnSeries":
        return ReturnSeries(self.ticker, self.dates[start:stop], self.log_returns[start:stop],
                            self.wildfire_flags[start:stop], self.market_returns[start:stop])


# ===== PANELS =====

@dataclass
class PanelObs:
    firm: str
    date: int
    y: float
    covariates: Dict[str, float] = field(default_factory=dict)
    weight: float = 1.0

    def __post_init__(self):
        if self.weight < 0:
            raise ParameterError("panel weights must be >= 0")
        if not np.isfinite(self.y) or not all(np.isfinite(v) for v in self.covariates.values()):
            raise ParameterError("panel outcome and covariates must be finite")
