import logging
from collections import defaultdict
from dataclasses import replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from wildfire_rnd.core.enums import Stage, ViolationType
from wildfire_rnd.core.errors import OutOfBandError, ParameterError, RepairError
from wildfire_rnd.core.models import OptionQuote, SurfaceSlice, to_iso
from wildfire_rnd.core.state import RunState
from wildfire_rnd.data.artifacts import curves_to_frame, slices_from_frame, slices_to_frame
from wildfire_rnd.data.quotes_io import load_quotes, load_treatment, quotes_frame, quotes_to_slices
from wildfire_rnd.engine.pricing_core import BsInputs, de_americanize
from wildfire_rnd.engine.rnd_extract import covers_moneyness, extract_rnd, rnd_moments, support_record
from wildfire_rnd.engine.surface_repair import RepairedSlice, arbitrage_gap_panel, repair_slice
from wildfire_rnd.handlers.ingest_handler import QUOTES, TREATMENT

logger = logging.getLogger(__name__)

EUROPEAN = "european.csv"
DEAMERICANIZE_REJECTS = "deamericanize_rejects.csv"
SLICES = "slices.csv"
REPAIR_REPORT = "repair_report.csv"
GAPS = "arbitrage_gaps.csv"
DENSITIES = "densities.csv"
SUPPORTS = "supports.csv"
MOMENTS = "rnd_moments.csv"


class DensityHandler:
    """De-Americanization, surface repair and risk-neutral density extraction"""

    def __init__(self, state: RunState = None):
        self.state = state or RunState.get_instance()

    # ===== DE-AMERICANIZATION =====
    def _european(self, quote: OptionQuote) -> Tuple[Optional[float], str]:
        config = self.state.config
        try:
            inputs = BsInputs(forward=quote.forward, strike=quote.strike, rate=quote.rate,
                              maturity=quote.maturity_years, is_call=quote.is_call)
            return de_americanize(quote.mid, inputs, n_steps=config.pricing.n_steps,
                                  div_yield=quote.div_yield), ""
        except (OutOfBandError, ParameterError) as exc:
            return None, str(exc)

    def handle_deamericanize(self) -> dict:
        stage = Stage.DEAMERICANIZE.value
        quotes = load_quotes(str(self.state.require(stage, QUOTES))).records
        if self.state.config.pricing.american:
            results = self.state.map(self._european, quotes)
        else:
            logger.info("[INGEST] quotes are European; mids passed through")
            results = [(q.mid, "") for q in quotes]

        kept, rejects = [], []
        for q, (price, reason) in zip(quotes, results):
            if price is None:
                rejects.append({'ticker': q.ticker, 'quote_date': to_iso(q.quote_date), 'expiry': to_iso(q.expiry),
                                'strike': q.strike, 'cp_flag': 'C' if q.is_call else 'P', 'reason': reason})
            else:
                kept.append(replace(q, bid=price, ask=price))
        if rejects:
            logger.warning(f"[INGEST] {len(rejects)} quote(s) outside the lattice band dropped")
        self.state.write_frame(stage, EUROPEAN, quotes_frame(kept))
        self.state.write_frame(stage, DEAMERICANIZE_REJECTS,
                               pd.DataFrame(rejects, columns=['ticker', 'quote_date', 'expiry', 'strike',
                                                              'cp_flag', 'reason']))
        return {'converted': len(kept), 'rejected': len(rejects)}

    # ===== REPAIR =====
    @staticmethod
    def _repair_group(group: List[SurfaceSlice]):
        out = []
        for s in group:
            neighbors = [n for n in group if n is not s]
            try:
                out.append((s, repair_slice(s, neighbors), ""))
            except (RepairError, ParameterError) as exc:
                out.append((s, None, str(exc)))
        return out

    def handle_repair(self) -> dict:
        stage = Stage.REPAIR.value
        quotes = load_quotes(str(self.state.require(stage, EUROPEAN))).records
        calendar = load_treatment(str(self.state.require(stage, TREATMENT)))
        groups = defaultdict(list)
        for s in quotes_to_slices(quotes, min_strikes=3):
            groups[(s.ticker, s.quote_date)].append(s)
        results = [item for batch in self.state.map(self._repair_group, [groups[k] for k in sorted(groups)])
                   for item in batch]

        repaired: List[RepairedSlice] = []
        report = []
        for s, fixed, error in results:
            row = {'ticker': s.ticker, 'quote_date': to_iso(s.quote_date), 'expiry': to_iso(s.expiry),
                   'n_strikes': int(s.strikes.size), 'error': error}
            if fixed is not None:
                repaired.append(fixed)
                row.update({v.value: fixed.violations_before.get(v, 0) for v in ViolationType})
                row.update({'max_abs_adjust': fixed.max_abs_adjust, 'kkt_residual': fixed.kkt_residual})
            report.append(row)
        failed = sum(1 for _, fixed, _ in results if fixed is None)
        if failed:
            logger.warning(f"[REPAIR] {failed} slice(s) could not be repaired and were dropped")

        self.state.write_frame(stage, SLICES, slices_to_frame(repaired))
        self.state.write_frame(stage, REPAIR_REPORT, pd.DataFrame(report))
        gaps = arbitrage_gap_panel(repaired, calendar)
        gaps['date'] = gaps['date'].map(to_iso)
        gaps['expiry'] = gaps['expiry'].map(to_iso)
        self.state.write_frame(stage, GAPS, gaps)
        adjusted = sum(1 for r in repaired if r.max_abs_adjust > 0)
        logger.info(f"[REPAIR] {len(repaired)} slices, {adjusted} adjusted")
        return {'slices': len(repaired), 'adjusted': adjusted, 'failed': failed}

    # ===== RISK-NEUTRAL DENSITIES =====
    def _extract(self, s: SurfaceSlice):
        density = self.state.config.density
        try:
            return extract_rnd(s, grid_size=density.grid_size,
                               bandwidth_multiplier=density.bandwidth_multiplier)
        except ParameterError as exc:
            logger.warning(f"[RND] {s.ticker} {to_iso(s.quote_date)}/{to_iso(s.expiry)} skipped: {exc}")
            return None

    def handle_rnd(self) -> dict:
        stage = Stage.RND.value
        density = self.state.config.density
        slices = slices_from_frame(self.state.read_frame(stage, SLICES))
        lo, hi = density.moneyness_coverage
        supports = pd.DataFrame([dict(support_record(s), covers=int(covers_moneyness(s, lo, hi))) for s in slices])
        usable = [s for s in slices if s.strikes.size >= density.min_strikes]
        if density.require_coverage:
            usable = [s for s in usable if covers_moneyness(s, lo, hi)]
        logger.info(f"[RND] {len(usable)} of {len(slices)} slices usable")
        curves = [c for c in self.state.map(self._extract, usable) if c is not None]

        moments = []
        for c in curves:
            m = rnd_moments(c)
            moments.append({'ticker': c.ticker, 'quote_date': to_iso(c.quote_date), 'expiry': to_iso(c.expiry),
                            'maturity': c.maturity, 'mass': c.mass, 'mean': m.mean, 'variance': m.variance,
                            'skewness': m.skewness, 'excess_kurtosis': m.excess_kurtosis,
                            'degenerate': int(m.degenerate)})
        if not supports.empty:
            supports['date'] = supports['date'].map(to_iso)
            supports['expiry'] = supports['expiry'].map(to_iso)
        self.state.write_frame(stage, DENSITIES, curves_to_frame(curves))
        self.state.write_frame(stage, SUPPORTS, supports)
        self.state.write_frame(stage, MOMENTS, pd.DataFrame(moments))
        return {'curves': len(curves), 'mean_mass': float(np.mean([c.mass for c in curves])) if curves else None}
