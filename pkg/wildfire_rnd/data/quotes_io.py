"""CSV ingestion of quotes, exposures and fires; treatment calendars; slice and IV panels."""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date as _date
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from wildfire_rnd.core.enums import ExposureMeasure, OptionRight, SnapshotMode
from wildfire_rnd.core.errors import DataError, ParameterError
from wildfire_rnd.core.models import (DAYS_PER_YEAR, ExposureRecord, FireEvent, OptionQuote,
                                      ReturnSeries, SurfaceSlice, TreatmentCalendar, to_day, to_iso,
                                      year_fraction)
from wildfire_rnd.engine.pricing_core import implied_vol_array
from wildfire_rnd.engine.surface_repair import join_treatment

logger = logging.getLogger(__name__)

QUOTE_COLUMNS = ['ticker', 'quote_date', 'expiry', 'strike', 'cp_flag', 'bid', 'ask',
                 'forward', 'rate', 'div_yield', 'iv']
EXPOSURE_COLUMNS = ['ticker', 'zip', 'share_estabs', 'share_emp', 'share_sales']
FIRE_COLUMNS = ['zip', 'start_date', 'end_date']
TREATMENT_COLUMNS = ['ticker', 'date', 'treated_now', 'after_first', 'after_last']
RETURN_COLUMNS = ['ticker', 'date', 'log_return', 'market_return']
SHARE_TOL = 1e-6


@dataclass
class RejectRecord:
    row: int
    reason: str

    def to_dict(self):
        return {'row': self.row, 'reason': self.reason}


@dataclass
class LoadResult:
    records: List = field(default_factory=list)
    rejects: List[RejectRecord] = field(default_factory=list)
    # file line of each kept record
    lines: List[int] = field(default_factory=list)

    def __len__(self):
        return len(self.records)


# ===== READERS =====

def _read_table(path: str, required: Sequence[str]) -> pd.DataFrame:
    try:
        table = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}")
    table.columns = [c.strip() for c in table.columns]
    missing = [c for c in required if c not in table.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    return table


def _parse_rows(table: pd.DataFrame, parse, label: str) -> LoadResult:
    result = LoadResult()
    for i, row in enumerate(table.to_dict(orient="records")):
        line = i + 2  # header is line 1
        try:
            record = parse(row)
            record.validate()
        except (ValueError, KeyError, TypeError, DataError) as exc:
            result.rejects.append(RejectRecord(row=line, reason=str(exc)))
            continue
        result.records.append(record)
        result.lines.append(line)
    if result.rejects:
        logger.warning(f"[INGEST] {label}: {len(result.rejects)} row(s) rejected, {len(result.records)} kept")
    return result


def load_quotes(path: str) -> LoadResult:
    """Option quotes; invalid rows become reject records with their line number"""
    table = _read_table(path, [c for c in QUOTE_COLUMNS if c != 'iv'])
    result = _parse_rows(table, OptionQuote.from_dict, path)
    logger.info(f"[INGEST] {path}: {len(result.records)} quotes")
    return result


def quotes_frame(quotes: Iterable[OptionQuote]) -> pd.DataFrame:
    return pd.DataFrame([q.to_dict() for q in quotes], columns=QUOTE_COLUMNS)


def write_quotes(quotes: Iterable[OptionQuote], path: str):
    quotes_frame(quotes).to_csv(path, index=False, float_format="%.10g")


def _exposure_from_dict(row) -> ExposureRecord:
    year = row.get('year', '')
    return ExposureRecord(ticker=str(row['ticker']).strip(), zip=str(row['zip']).strip(),
                          share_estabs=float(row['share_estabs']), share_emp=float(row['share_emp']),
                          share_sales=float(row['share_sales']),
                          year=int(year) if str(year).strip() else None)


def load_exposures(path: str) -> LoadResult:
    """Exposure shares; a (ticker, year) whose shares sum above 1 is rejected whole"""
    table = _read_table(path, EXPOSURE_COLUMNS)
    result = _parse_rows(table, _exposure_from_dict, path)
    totals: Dict[Tuple[str, Optional[int]], np.ndarray] = defaultdict(lambda: np.zeros(len(ExposureMeasure)))
    for rec in result.records:
        totals[(rec.ticker, rec.year)] += rec.shares()
    over = {key for key, total in totals.items() if np.any(total > 1.0 + SHARE_TOL)}
    if over:
        kept, kept_lines = [], []
        for rec, line in zip(result.records, result.lines):
            if (rec.ticker, rec.year) in over:
                result.rejects.append(RejectRecord(row=line, reason=f"{rec.ticker} shares sum above 1"))
            else:
                kept.append(rec)
                kept_lines.append(line)
        result.records, result.lines = kept, kept_lines
        result.rejects.sort(key=lambda r: r.row)
        logger.warning(f"[INGEST] {len(over)} firm snapshot(s) with shares summing above 1 rejected")
    return result


def load_fires(path: str) -> LoadResult:
    table = _read_table(path, FIRE_COLUMNS)
    return _parse_rows(table, lambda row: FireEvent(zip=str(row['zip']).strip(),
                                                    start_date=to_day(row['start_date']),
                                                    end_date=to_day(row['end_date'])), path)


def load_treatment(path: str) -> List[TreatmentCalendar]:
    table = _read_table(path, TREATMENT_COLUMNS)
    return [TreatmentCalendar.from_dict(row) for row in table.to_dict(orient="records")]


def treatment_frame(calendar: Iterable[TreatmentCalendar]) -> pd.DataFrame:
    rows = [c.to_dict() for c in sorted(calendar, key=lambda c: (c.ticker, c.date))]
    return pd.DataFrame(rows, columns=TREATMENT_COLUMNS)


def write_treatment(calendar: Iterable[TreatmentCalendar], path: str):
    treatment_frame(calendar).to_csv(path, index=False)


def load_returns(path: str, calendar: Optional[Sequence[TreatmentCalendar]] = None) -> Dict[str, ReturnSeries]:
    """Daily return series per ticker with wildfire flags taken from the calendar"""
    table = _read_table(path, RETURN_COLUMNS)
    frame = pd.DataFrame({'ticker': table['ticker'].str.strip(),
                          'date': table['date'].map(to_day),
                          'log_return': pd.to_numeric(table['log_return'], errors="coerce"),
                          'market_return': pd.to_numeric(table['market_return'], errors="coerce")})
    flags = {(c.ticker, c.date): float(c.treated_now) for c in calendar or ()}
    out = {}
    for ticker, rows in frame.sort_values(['ticker', 'date'], kind="mergesort").groupby('ticker', sort=True):
        dates = rows['date'].to_numpy()
        out[ticker] = ReturnSeries(ticker=ticker, dates=dates, log_returns=rows['log_return'].to_numpy(),
                                   wildfire_flags=np.array([flags.get((ticker, d), 0.0) for d in dates]),
                                   market_returns=rows['market_return'].to_numpy())
    return out


# ===== TREATMENT =====

def _snapshots(exposures: Sequence[ExposureRecord]) -> Dict[str, Dict[Optional[int], Dict[str, np.ndarray]]]:
    """ticker -> year -> zip -> shares in ExposureMeasure order"""
    table: Dict[str, Dict[Optional[int], Dict[str, np.ndarray]]] = defaultdict(lambda: defaultdict(dict))
    for rec in exposures:
        table[rec.ticker][rec.year][rec.zip] = rec.shares()
    return table


def _snapshot_for(years: Dict[Optional[int], Dict[str, np.ndarray]], day: int,
                  mode: SnapshotMode) -> Dict[str, np.ndarray]:
    if None in years or not years:
        return years.get(None, {})
    if mode is SnapshotMode.LATEST:
        return years[max(years)]
    year = _date.fromordinal(day).year
    eligible = [y for y in years if y <= year]
    return years[max(eligible)] if eligible else {}


def compute_treatment(exposures: Sequence[ExposureRecord], fires: Sequence[FireEvent],
                      dates: Iterable[int], threshold: float = 0.10,
                      snapshot: SnapshotMode = SnapshotMode.LATEST) -> List[TreatmentCalendar]:
    """Per firm-day treatment flags.

    A firm is treated on a day when, for at least one of establishments,
    employment or sales, its shares in zips with an active fire sum to at
    least ``threshold``. after_first holds from the first treated day and
    after_last from the last treated day on.
    """
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"threshold must lie in (0, 1], got {threshold}")
    snapshot = SnapshotMode(snapshot)
    days = sorted(set(int(d) for d in dates))
    table = _snapshots(exposures)
    known = {rec.zip for rec in exposures}
    unknown = sorted({f.zip for f in fires} - known)
    if unknown:
        logger.warning(f"[INGEST] {len(unknown)} fire zip(s) with no exposed firm ignored")
    fires = sorted((f for f in fires if f.zip in known), key=lambda f: (f.zip, f.start_date, f.end_date))

    calendar = []
    for ticker in sorted(table):
        treated = []
        for day in days:
            burning = {f.zip for f in fires if f.active_on(day)}
            shares = _snapshot_for(table[ticker], day, snapshot)
            total = np.zeros(len(ExposureMeasure))
            for zip_code in burning & shares.keys():
                total += shares[zip_code]
            treated.append(bool(np.any(total >= threshold - 1e-12)))
        hits = [d for d, t in zip(days, treated) if t]
        first, last = (hits[0], hits[-1]) if hits else (None, None)
        for day, now in zip(days, treated):
            calendar.append(TreatmentCalendar(ticker=ticker, date=day, treated_now=now,
                                              after_first=first is not None and day >= first,
                                              after_last=last is not None and day >= last))
    n_treated = sum(c.treated_now for c in calendar)
    logger.info(f"[INGEST] treatment: {len(table)} firms, {len(days)} days, {n_treated} treated firm-days")
    return calendar


# ===== SLICES AND PANELS =====

def quotes_to_slices(quotes: Sequence[OptionQuote], prices: Optional[Sequence[float]] = None,
                     min_strikes: int = 1) -> List[SurfaceSlice]:
    """Call-price slices per (ticker, date, expiry) from out-of-the-money quotes.

    Puts below the forward become calls through parity. ``prices`` overrides
    the quote mids, for example with de-Americanized values.
    """
    mids = [q.mid for q in quotes] if prices is None else list(prices)
    if len(mids) != len(quotes):
        raise ParameterError("prices must align with quotes")
    groups: Dict[Tuple[str, int, int], List[Tuple[OptionQuote, float]]] = defaultdict(list)
    for q, price in zip(quotes, mids):
        groups[(q.ticker, q.quote_date, q.expiry)].append((q, price))

    slices = []
    for (ticker, quote_date, expiry), items in sorted(groups.items()):
        forward = float(np.mean([q.forward for q, _ in items]))
        rate = float(np.mean([q.rate for q, _ in items]))
        div_yield = float(np.mean([q.div_yield for q, _ in items]))
        T = year_fraction(quote_date, expiry)
        discount = np.exp(-rate * T)
        by_strike: Dict[float, Dict[bool, List[float]]] = defaultdict(lambda: {True: [], False: []})
        for q, price in items:
            call = price if q.is_call else price + discount * (forward - q.strike)
            by_strike[q.strike][q.is_call].append(call)
        strikes, calls = [], []
        for strike in sorted(by_strike):
            sides = by_strike[strike]
            otm = sides[True] if strike >= forward else sides[False]
            chosen = otm or sides[True] or sides[False]
            strikes.append(strike)
            calls.append(float(np.mean(chosen)))
        if len(strikes) < min_strikes:
            logger.debug(f"[INGEST] {ticker} {to_iso(quote_date)}/{to_iso(expiry)}: {len(strikes)} strikes, skipped")
            continue
        slices.append(SurfaceSlice(ticker=ticker, quote_date=quote_date, expiry=expiry, maturity_years=T,
                                   strikes=np.array(strikes), calls=np.array(calls), forward=forward,
                                   rate=rate, div_yield=div_yield))
    return slices


def iv_panel(slices: Sequence[SurfaceSlice], calendar: Optional[Sequence[TreatmentCalendar]] = None,
             maturity_unit: str = "days") -> pd.DataFrame:
    """Long out-of-the-money IV panel with treatment flags"""
    if maturity_unit not in ("days", "years"):
        raise ParameterError(f"maturity_unit must be 'days' or 'years', got {maturity_unit!r}")
    frames = []
    for s in slices:
        K, F, D, T = s.strikes, s.forward, s.discount, s.maturity_years
        is_call = K >= F
        prices = np.where(is_call, s.calls, s.calls - D * (F - K))
        ivs, status = implied_vol_array(prices, F, K, s.rate, T, is_call)
        ok = status == 0
        if not ok.all():
            logger.debug(f"[INGEST] {s.ticker}: {int((~ok).sum())} quotes outside the IV band dropped")
        maturity = T * DAYS_PER_YEAR if maturity_unit == "days" else T
        frames.append(pd.DataFrame({
            'firm': s.ticker, 'date': s.quote_date, 'expiry': s.expiry, 'strike': K[ok],
            'moneyness': K[ok] / F, 'maturity': maturity, 'sqrt_maturity': np.sqrt(maturity),
            'iv': ivs[ok], 'right': np.where(is_call[ok], OptionRight.CALL.value, OptionRight.PUT.value),
        }))
    columns = ['firm', 'date', 'expiry', 'strike', 'moneyness', 'maturity', 'sqrt_maturity', 'iv', 'right']
    panel = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
    return join_treatment(panel, calendar, firm_col='firm', date_col='date')
