import logging

import numpy as np
import pandas as pd

from wildfire_rnd.core.enums import Stage
from wildfire_rnd.core.errors import NumericError, ParameterError
from wildfire_rnd.core.models import to_iso
from wildfire_rnd.core.state import RunState
from wildfire_rnd.data.artifacts import curves_from_frame
from wildfire_rnd.engine.kernel_ra import (PortfolioDecomposition, estimate_gamma_w, gamma_from_gamma_w,
                                           implied_portfolio_share, pricing_kernel, summarize_risk_aversion,
                                           verify_prop1_mc)
from wildfire_rnd.handlers.density_handler import DENSITIES
from wildfire_rnd.handlers.garch_handler import PHYSICAL

logger = logging.getLogger(__name__)

KERNELS = "kernels.csv"
GAMMA_W = "gamma_w.csv"
RISK_AVERSION = "risk_aversion.json"
PROP1 = "prop1.json"


class KernelHandler:
    def __init__(self, state: RunState = None):
        self.state = state or RunState.get_instance()

    def _decomposition(self) -> PortfolioDecomposition:
        p = self.state.config.kernel.prop1
        return PortfolioDecomposition(q=p['q'], q_w=p['q_w'], beta=p['beta'], sigma=p['sigma'], sigma_w=p['sigma_w'])

    def handle_kernel(self) -> dict:
        """Pricing kernels per slice, gamma_w per slice and pooled, implied risk aversion"""
        stage = Stage.KERNEL.value
        kernel_cfg = self.state.config.kernel
        rnd = {(c.ticker, c.quote_date, c.expiry): c
               for c in curves_from_frame(self.state.read_frame(stage, DENSITIES))}
        phys = {(c.ticker, c.quote_date, c.expiry): c
                for c in curves_from_frame(self.state.read_frame(stage, PHYSICAL))}

        kernels, frames, rows = [], [], []
        for key in sorted(rnd.keys() & phys.keys()):
            try:
                kernel = pricing_kernel(rnd[key], phys[key], floor=kernel_cfg.density_floor)
                estimate = estimate_gamma_w(kernel)
            except (NumericError, ParameterError) as exc:
                logger.warning(f"[KERNEL] {key[0]} {to_iso(key[1])}/{to_iso(key[2])} skipped: {exc}")
                continue
            kernels.append(kernel)
            frame = kernel.to_frame()
            frame.insert(0, 'maturity', kernel.maturity)
            frame.insert(0, 'expiry', to_iso(key[2]))
            frame.insert(0, 'quote_date', to_iso(key[1]))
            frame.insert(0, 'ticker', key[0])
            frames.append(frame)
            rows.append(dict(ticker=key[0], quote_date=to_iso(key[1]), expiry=to_iso(key[2]),
                             maturity=kernel.maturity, **estimate.to_dict()))
        if not kernels:
            raise NumericError("no slice has overlapping risk-neutral and physical support")

        pooled = None
        if len(kernels) > 1:
            try:
                pooled = estimate_gamma_w(kernels, pooled=True, maturity_bins=kernel_cfg.maturity_bins)
            except (ParameterError, np.linalg.LinAlgError) as exc:
                logger.warning(f"[KERNEL] pooled gamma_w unavailable: {exc}")

        decomp = self._decomposition()
        per_slice = pd.DataFrame(rows)
        headline = pooled.gamma_w if pooled is not None else float(per_slice['gamma_w'].median())
        payload = {'pooled': pooled.to_dict() if pooled is not None else None,
                   'decomposition': decomp.to_dict(), 'headline_gamma_w': headline}
        try:
            gamma = gamma_from_gamma_w(headline, decomp)
            gammas = [gamma_from_gamma_w(g, decomp) for g in per_slice['gamma_w']]
            shares = ([implied_portfolio_share(g, gamma, decomp.rho, decomp.sigma, decomp.sigma_w, decomp.q).q_w
                       for g in per_slice['gamma_w']] if gamma > 0 else [])
            payload.update({'gamma': gamma, 'summary': summarize_risk_aversion(gammas, shares)})
        except (NumericError, ParameterError) as exc:
            logger.warning(f"[KERNEL] implied risk aversion unavailable: {exc}")
            payload.update({'gamma': None, 'summary': None})

        self.state.write_frame(stage, KERNELS, pd.concat(frames, ignore_index=True))
        self.state.write_frame(stage, GAMMA_W, per_slice)
        self.state.write_json(stage, RISK_AVERSION, payload)
        puzzles = int(per_slice['puzzle'].sum())
        logger.info(f"[KERNEL] {len(kernels)} kernels, {puzzles} with an upward-sloping segment")
        return {'kernels': len(kernels), 'gamma': payload['gamma'], 'puzzles': puzzles}

    def handle_prop1(self) -> dict:
        """Monte Carlo check of the wealth-kernel slope against its closed form"""
        stage = Stage.PROP1.value
        p = self.state.config.kernel.prop1
        report = verify_prop1_mc(q=p['q'], q_w=p['q_w'], beta=p['beta'], sigma=p['sigma'], sigma_w=p['sigma_w'],
                                 mu=p['mu'], alpha=p['alpha'], r=p['r'], gamma=p['gamma'], T=p['T'],
                                 n_paths=int(p['n_paths']), seed=self.state.config.seed,
                                 n_blocks=int(p['n_blocks']), workers=self.state.threads)
        self.state.write_json(stage, PROP1, report.to_dict())
        return {'slope': report.slope, 'covers_projection': report.covers_projection}
