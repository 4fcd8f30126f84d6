"""Tidy CSV layouts for the slices and density curves passed between stages."""
from typing import List, Sequence

import numpy as np
import pandas as pd

from wildfire_rnd.core.enums import DensityKind
from wildfire_rnd.core.errors import DataError
from wildfire_rnd.core.models import DensityCurve, SurfaceSlice, to_day, to_iso
from wildfire_rnd.engine.surface_repair import RepairedSlice

SLICE_COLUMNS = ['ticker', 'quote_date', 'expiry', 'maturity_years', 'forward', 'rate', 'div_yield',
                 'strike', 'call', 'observed', 'adjustment']
DENSITY_COLUMNS = ['ticker', 'quote_date', 'expiry', 'maturity', 'forward', 'discount', 'kind',
                   'bandwidth', 'grid_k', 'moneyness', 'density', 'cdf', 'supported']


def _check(frame: pd.DataFrame, columns: Sequence[str], label: str):
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{label} artifact is missing column(s) {', '.join(missing)}")


def slices_to_frame(repaired: Sequence[RepairedSlice]) -> pd.DataFrame:
    frames = []
    for item in repaired:
        s = item.slice
        frames.append(pd.DataFrame({
            'ticker': s.ticker, 'quote_date': to_iso(s.quote_date), 'expiry': to_iso(s.expiry),
            'maturity_years': s.maturity_years, 'forward': s.forward, 'rate': s.rate,
            'div_yield': s.div_yield, 'strike': s.strikes, 'call': s.calls,
            'observed': item.observed, 'adjustment': item.delta_prices,
        }))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SLICE_COLUMNS)


def slices_from_frame(frame: pd.DataFrame) -> List[SurfaceSlice]:
    _check(frame, SLICE_COLUMNS[:9], "slice")
    slices = []
    for (ticker, quote_date, expiry), rows in frame.groupby(['ticker', 'quote_date', 'expiry'], sort=True):
        rows = rows.sort_values('strike', kind="mergesort")
        first = rows.iloc[0]
        slices.append(SurfaceSlice(ticker=str(ticker), quote_date=to_day(quote_date), expiry=to_day(expiry),
                                   maturity_years=float(first['maturity_years']),
                                   strikes=rows['strike'].to_numpy(float), calls=rows['call'].to_numpy(float),
                                   forward=float(first['forward']), rate=float(first['rate']),
                                   div_yield=float(first['div_yield'])))
    return slices


def curves_to_frame(curves: Sequence[DensityCurve]) -> pd.DataFrame:
    frames = []
    for c in curves:
        frames.append(pd.DataFrame({
            'ticker': c.ticker, 'quote_date': to_iso(c.quote_date), 'expiry': to_iso(c.expiry),
            'maturity': c.maturity, 'forward': c.forward, 'discount': c.discount, 'kind': c.kind.value,
            'bandwidth': c.bandwidth, 'grid_k': c.grid, 'moneyness': c.moneyness, 'density': c.values,
            'cdf': c.cdf if c.cdf is not None else np.nan, 'supported': c.supported.astype(int),
        }))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=DENSITY_COLUMNS)


def curves_from_frame(frame: pd.DataFrame) -> List[DensityCurve]:
    _check(frame, DENSITY_COLUMNS, "density")
    curves = []
    for (ticker, quote_date, expiry), rows in frame.groupby(['ticker', 'quote_date', 'expiry'], sort=True):
        rows = rows.sort_values('grid_k', kind="mergesort")
        first = rows.iloc[0]
        cdf = rows['cdf'].to_numpy(float)
        curves.append(DensityCurve(grid=rows['grid_k'].to_numpy(float), values=rows['density'].to_numpy(float),
                                   maturity=float(first['maturity']), discount=float(first['discount']),
                                   kind=DensityKind(first['kind']), forward=float(first['forward']),
                                   ticker=str(ticker), quote_date=to_day(quote_date), expiry=to_day(expiry),
                                   cdf=None if np.isnan(cdf).all() else cdf,
                                   supported=rows['supported'].to_numpy(int).astype(bool),
                                   bandwidth=float(first['bandwidth'])))
    return curves
