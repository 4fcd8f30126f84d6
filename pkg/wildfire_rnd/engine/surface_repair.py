"""No-arbitrage diagnostics and least-squares repair of call-price slices."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import nnls

from wildfire_rnd.core.enums import ViolationType
from wildfire_rnd.core.errors import ParameterError, RepairError
from wildfire_rnd.core.models import SurfaceSlice, TreatmentCalendar

logger = logging.getLogger(__name__)

CHECK_TOL = 1e-8
FEASIBILITY_TOL = 1e-12
ACTIVE_TOL = 1e-9


@dataclass
class ArbitrageReport:
    counts: Dict[ViolationType, int] = field(default_factory=lambda: {v: 0 for v in ViolationType})
    locations: List[Tuple[ViolationType, float]] = field(default_factory=list)

    def add(self, kind: ViolationType, strike: float):
        self.counts[kind] += 1
        self.locations.append((kind, float(strike)))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def per_maturity_total(self) -> int:
        return self.total - self.counts[ViolationType.CALENDAR]

    def to_dict(self):
        return {kind.value: n for kind, n in self.counts.items()}


@dataclass
class RepairedSlice:
    slice: SurfaceSlice
    observed: np.ndarray
    delta_prices: np.ndarray
    violations_before: Dict[ViolationType, int]
    max_abs_adjust: float
    primal_residual: float = 0.0
    stationarity_residual: float = 0.0
    active_set: List[str] = field(default_factory=list)

    @property
    def kkt_residual(self) -> float:
        return max(self.primal_residual, self.stationarity_residual)


# ===== DIAGNOSTICS =====

def _slopes(slice_: SurfaceSlice) -> np.ndarray:
    return np.diff(slice_.calls) / np.diff(slice_.strikes)


def check_arbitrage(slice_: SurfaceSlice, neighbors: Sequence[SurfaceSlice] = (),
                    tol: float = CHECK_TOL) -> ArbitrageReport:
    """Flag butterfly, call-spread, bound and calendar violations.

    ``tol`` is relative to the forward: prices are compared with tol * F and
    slopes with tol * F / dK on each strike step.
    """
    report = ArbitrageReport()
    K, C = slice_.strikes, slice_.calls
    F, D = slice_.forward, slice_.discount
    price_tol = tol * max(F, 1.0)
    if K.size >= 2:
        steps = np.diff(K)
        slopes = _slopes(slice_)
        slope_tol = price_tol / steps
        for i, s in enumerate(slopes):
            if s > slope_tol[i] or s < -D - slope_tol[i]:
                report.add(ViolationType.CALL_SPREAD, K[i + 1])
        for i in range(1, K.size - 1):
            if slopes[i] - slopes[i - 1] < -(slope_tol[i] + slope_tol[i - 1]):
                report.add(ViolationType.BUTTERFLY, K[i])
    lower = np.maximum(0.0, D * (F - K))
    upper = D * F
    for k, c, lo in zip(K, C, lower):
        if c < lo - price_tol or c > upper + price_tol:
            report.add(ViolationType.BOUNDS, k)

    # forward-normalized call prices must not fall with maturity at fixed moneyness
    own = C / (D * F)
    m = K / F
    for other in neighbors:
        if other.maturity_years == slice_.maturity_years:
            continue
        m_other = other.strikes / other.forward
        inside = (m >= m_other[0]) & (m <= m_other[-1])
        if not inside.any():
            continue
        theirs = np.interp(m[inside], m_other, other.calls / (other.discount * other.forward))
        if other.maturity_years > slice_.maturity_years:
            bad = own[inside] > theirs + tol
        else:
            bad = own[inside] < theirs - tol
        for k in K[inside][bad]:
            report.add(ViolationType.CALENDAR, k)
    return report


# ===== REPAIR =====

def _constraint_system(slice_: SurfaceSlice):
    """Rows of G c >= h for one maturity, each row scaled to unit norm"""
    K = slice_.strikes
    n = K.size
    F, D = slice_.forward, slice_.discount
    dk = np.diff(K)
    rows, rhs, labels = [], [], []

    for i in range(1, n - 1):
        g = np.zeros(n)
        g[i - 1] = 1.0 / dk[i - 1]
        g[i] = -1.0 / dk[i - 1] - 1.0 / dk[i]
        g[i + 1] = 1.0 / dk[i]
        rows.append(g); rhs.append(0.0); labels.append(f"butterfly@{K[i]:g}")
    for i in range(n - 1):
        g = np.zeros(n)
        g[i], g[i + 1] = 1.0 / dk[i], -1.0 / dk[i]
        rows.append(g); rhs.append(0.0); labels.append(f"monotone@{K[i + 1]:g}")
        rows.append(-g); rhs.append(-D); labels.append(f"slope_floor@{K[i + 1]:g}")
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        rows.append(e); rhs.append(max(0.0, D * (F - K[i]))); labels.append(f"lower@{K[i]:g}")
        rows.append(-e); rhs.append(-D * F); labels.append(f"upper@{K[i]:g}")

    G = np.array(rows)
    h = np.array(rhs)
    norms = np.linalg.norm(G, axis=1)
    return G / norms[:, None], h / norms, labels


def _least_distance(G: np.ndarray, r: np.ndarray) -> np.ndarray:
    """min ||x|| subject to G x >= r, through the NNLS dual"""
    n = G.shape[1]
    E = np.vstack([G.T, r[None, :]])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u, _ = nnls(E, f, maxiter=50 * E.shape[1])
    resid = E @ u - f
    if np.linalg.norm(resid) < 1e-14 or abs(resid[-1]) < 1e-300:
        return None
    return -resid[:n] / resid[-1]


def repair_slice(slice_: SurfaceSlice, neighbors: Sequence[SurfaceSlice] = ()) -> RepairedSlice:
    """Closest arbitrage-free call prices in the least-squares sense.

    Feasible input comes back untouched. Otherwise the projection is
    solved as a least-distance program and polished on its active set.
    """
    if slice_.strikes.size < 3:
        raise ParameterError(f"{slice_.ticker}: repair needs >= 3 strikes")
    before = check_arbitrage(slice_, neighbors).counts
    G, h, labels = _constraint_system(slice_)
    C = slice_.calls
    scale = max(slice_.forward, 1.0)
    r = h - G @ C

    if np.max(r) <= FEASIBILITY_TOL * scale:
        return RepairedSlice(slice=slice_, observed=C.copy(), delta_prices=np.zeros_like(C),
                             violations_before=before, max_abs_adjust=0.0)

    x = _least_distance(G, r)
    if x is None:
        dump = {'labels': labels, 'G': G.tolist(), 'r': r.tolist()}
        raise RepairError(f"{slice_.ticker}: no-arbitrage constraints are infeasible", dump)

    active = np.flatnonzero(G @ x - r <= ACTIVE_TOL * scale)
    if active.size:
        polished = np.linalg.lstsq(G[active], r[active], rcond=None)[0]
        if np.max(r - G @ polished) <= max(np.max(r - G @ x), FEASIBILITY_TOL * scale):
            x = polished
    primal = float(max(0.0, np.max(r - G @ x)))
    stationarity = 0.0
    if active.size:
        multipliers = np.linalg.lstsq(G[active].T, x, rcond=None)[0]
        stationarity = float(np.max(np.abs(G[active].T @ multipliers - x)))
        if multipliers.min() < -1e-8 * scale:
            logger.warning(f"[REPAIR] {slice_.ticker}: negative multiplier {multipliers.min():.2e}")

    repaired = slice_.with_calls(C + x)
    logger.debug(f"[REPAIR] {slice_.ticker} {slice_.expiry}: max adjust {np.max(np.abs(x)):.3e}, "
                 f"{active.size} active constraints")
    return RepairedSlice(slice=repaired, observed=C.copy(), delta_prices=x,
                         violations_before=before, max_abs_adjust=float(np.max(np.abs(x))),
                         primal_residual=primal, stationarity_residual=stationarity,
                         active_set=[labels[i] for i in active])


def arbitrage_gap_panel(repaired: Sequence[RepairedSlice],
                        calendar: Optional[Sequence[TreatmentCalendar]] = None) -> pd.DataFrame:
    """Long-format repair gaps joined to treatment flags by (ticker, date)"""
    frames = []
    for item in repaired:
        s = item.slice
        delta = np.asarray(item.delta_prices, dtype=float)
        abs_delta = np.abs(delta)
        with np.errstate(divide="ignore"):
            log_abs = np.where(abs_delta > 0, np.log(abs_delta), np.nan)
        frames.append(pd.DataFrame({
            'ticker': s.ticker, 'date': s.quote_date, 'expiry': s.expiry,
            'maturity': s.maturity_years, 'strike': s.strikes, 'moneyness': s.moneyness,
            'delta': delta, 'abs_delta': abs_delta, 'log_abs_delta': log_abs,
        }))
    columns = ['ticker', 'date', 'expiry', 'maturity', 'strike', 'moneyness',
               'delta', 'abs_delta', 'log_abs_delta']
    gaps = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
    return join_treatment(gaps, calendar)


def join_treatment(frame: pd.DataFrame, calendar: Optional[Sequence[TreatmentCalendar]],
                   firm_col: str = 'ticker', date_col: str = 'date') -> pd.DataFrame:
    """Left-join the three treatment flags; unmatched rows are untreated"""
    flags = ['treated_now', 'after_first', 'after_last']
    if calendar:
        table = pd.DataFrame([c.to_dict() for c in calendar])
        table['date'] = [c.date for c in calendar]
        table = table.rename(columns={'ticker': firm_col, 'date': date_col})
        frame = frame.merge(table, on=[firm_col, date_col], how='left')
    for flag in flags:
        if flag not in frame:
            frame[flag] = 0
        frame[flag] = frame[flag].fillna(0).astype(int)
    return frame
