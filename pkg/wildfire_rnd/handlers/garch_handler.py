import logging
from dataclasses import replace
from typing import Dict

import numpy as np

from wildfire_rnd.core.enums import Regime, Stage
from wildfire_rnd.core.errors import DataError, NumericError, ParameterError, WildfireRndError
from wildfire_rnd.core.models import GarchWildfireParams, MarketGarchParams, ReturnSeries, to_iso
from wildfire_rnd.core.state import RunState
from wildfire_rnd.data.artifacts import curves_from_frame, curves_to_frame
from wildfire_rnd.data.quotes_io import load_returns, load_treatment
from wildfire_rnd.engine.physical_density import (TRADING_DAYS, filter_state, first_event_index,
                                                  fit_garch_wildfire, fit_market_garch, forecast_density,
                                                  regime_window, wildfire_hazard)
from wildfire_rnd.handlers.density_handler import DENSITIES
from wildfire_rnd.handlers.ingest_handler import TREATMENT

logger = logging.getLogger(__name__)

GARCH_FITS = "garch_fits.json"
PHYSICAL = "physical.csv"


class GarchHandler:
    def __init__(self, state: RunState = None):
        self.state = state or RunState.get_instance()

    def _returns(self, stage: str) -> Dict[str, ReturnSeries]:
        calendar = load_treatment(str(self.state.require(stage, TREATMENT)))
        returns = load_returns(str(self.state.require_input(stage, 'returns')), calendar)
        if not returns:
            raise DataError("return file has no series")
        return returns

    def handle_fit(self) -> dict:
        """Market GARCH on the longest market series, then one GARCH-Wildfire fit per firm"""
        stage = Stage.GARCH.value
        garch = self.state.config.garch
        returns = self._returns(stage)
        longest = max(sorted(returns), key=lambda t: len(returns[t]))
        market = fit_market_garch(returns[longest].market_returns, garch.grad_tol, garch.max_iter)

        def fit_one(ticker):
            series = returns[ticker]
            window = regime_window(series, Regime(garch.regime), first_event_index(series), garch.foresight_window)
            try:
                return ticker, fit_garch_wildfire(window, market.params, garch.n_lags,
                                                  garch.grad_tol, garch.max_iter), ""
            except (DataError, NumericError, ParameterError, np.linalg.LinAlgError) as exc:
                logger.warning(f"[GARCH] {ticker}: fit failed: {exc}")
                return ticker, None, str(exc)

        firms, failures = {}, {}
        for ticker, fit, error in self.state.map(fit_one, sorted(returns)):
            if fit is None:
                failures[ticker] = error
            else:
                firms[ticker] = fit.to_dict()
        payload = {'regime': garch.regime, 'market_source': longest, 'market': market.to_dict(),
                   'firms': firms, 'failures': failures}
        self.state.write_json(stage, GARCH_FITS, payload)
        logger.info(f"[GARCH] {len(firms)} firm fits, {len(failures)} failures")
        return {'fitted': len(firms), 'failed': len(failures)}

    def handle_forecast(self) -> dict:
        """Physical densities on each risk-neutral grid, one seeded simulation per slice"""
        stage = Stage.GARCH.value
        config = self.state.config
        fits = self.state.read_json(stage, GARCH_FITS)
        curves = curves_from_frame(self.state.read_frame(stage, DENSITIES))
        calendar = load_treatment(str(self.state.require(stage, TREATMENT)))
        returns = self._returns(stage)
        market = MarketGarchParams.from_dict(fits['market']['params'])
        hazards = {t: wildfire_hazard(calendar, t).probability for t in sorted(fits['firms'])}

        def forecast(task):
            task_id, curve = task
            fit = fits['firms'].get(curve.ticker)
            series = returns.get(curve.ticker)
            if fit is None or series is None:
                logger.warning(f"[GARCH] {curve.ticker}: no fitted model, slice skipped")
                return None
            upto = int(np.searchsorted(series.dates, curve.quote_date, side="right")) - 1
            if upto < 0:
                logger.warning(f"[GARCH] {curve.ticker}: no returns before {to_iso(curve.quote_date)}")
                return None
            params = GarchWildfireParams.from_dict(fit['params'])
            spot = curve.forward * curve.discount
            horizon = max(1, int(round((curve.expiry - curve.quote_date) * TRADING_DAYS / 365.0)))
            try:
                origin = filter_state(params, market, series, upto, spot)
                phys = forecast_density(params, market, origin, horizon, config.garch.n_paths,
                                        Regime(config.garch.regime), hazards[curve.ticker], curve.grid,
                                        seed=config.seed ^ task_id, maturity=curve.maturity,
                                        discount=curve.discount, forward=curve.forward, ticker=curve.ticker)
            except WildfireRndError as exc:
                logger.warning(f"[GARCH] {curve.ticker} {to_iso(curve.quote_date)}: forecast failed: {exc}")
                return None
            return replace(phys, quote_date=curve.quote_date, expiry=curve.expiry)

        physical = [c for c in self.state.map(forecast, list(enumerate(curves))) if c is not None]
        self.state.write_frame(stage, PHYSICAL, curves_to_frame(physical))
        return {'densities': len(physical), 'skipped': len(curves) - len(physical)}
