import logging
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from wildfire_rnd.core.enums import BinMode, OptionRight, Stage, TreatmentFlag
from wildfire_rnd.core.errors import DataError, NumericError, ParameterError
from wildfire_rnd.core.models import to_day
from wildfire_rnd.core.state import RunState
from wildfire_rnd.data.artifacts import curves_from_frame, slices_from_frame
from wildfire_rnd.data.quotes_io import iv_panel, load_treatment
from wildfire_rnd.engine.panel_metrics import (density_panel, fwl_surface, gap_treatment_regression,
                                               permanent_effect_regression, rnd_te_binned, rnd_te_kernel,
                                               skew_crossover_maturity, smile_regression, support_regression)
from wildfire_rnd.engine.surface_repair import join_treatment
from wildfire_rnd.handlers.density_handler import DENSITIES, GAPS, SLICES, SUPPORTS
from wildfire_rnd.handlers.ingest_handler import TREATMENT

logger = logging.getLogger(__name__)

PANEL_KINDS = ('smile', 'rnd-te', 'permanent', 'fwl', 'gaps', 'support')
TE_PROFILE = "te_profile.csv"
FWL_SURFACE = "fwl_surface.csv"
RIGHTS = {'puts': OptionRight.PUT, 'calls': OptionRight.CALL}


def te_kernel_name(bandwidth: float) -> str:
    return f"te_profile_kernel_{bandwidth:g}.csv"


class PanelHandler:
    """Fixed-effects regressions on the IV, density, gap and support panels"""

    def __init__(self, state: RunState = None):
        self.state = state or RunState.get_instance()

    def _calendar(self, stage: str):
        return load_treatment(str(self.state.require(stage, TREATMENT)))

    def _iv_panel(self, stage: str) -> pd.DataFrame:
        slices = slices_from_frame(self.state.read_frame(stage, SLICES))
        return iv_panel(slices, self._calendar(stage), maturity_unit=self.state.config.panel.maturity_unit)

    def _dated(self, stage: str, name: str) -> pd.DataFrame:
        frame = self.state.read_frame(stage, name)
        frame['date'] = frame['date'].map(to_day)
        return frame

    def handle_smile(self, stage: str) -> dict:
        panel = self._iv_panel(stage)
        out = {}
        for label, right in RIGHTS.items():
            try:
                table = smile_regression(panel, right)
            except ParameterError as exc:
                logger.warning(f"[PANEL] smile regression for {label} skipped: {exc}")
                continue
            self.state.write_json(stage, f"panel_smile_{label}.json", table.to_dict())
            frame = table.to_frame()
            frame.columns = [f"{col}_{stat}" for col, stat in frame.columns]
            self.state.write_frame(stage, f"panel_smile_{label}.csv", frame.rename_axis('term').reset_index())
            out[label] = table.columns['both'].coefs.to_dict()
        return out

    def handle_permanent(self, stage: str) -> dict:
        panel = self._iv_panel(stage)
        payload = {}
        for label, right in RIGHTS.items():
            for flag in (TreatmentFlag.AFTER_FIRST, TreatmentFlag.AFTER_LAST):
                key = f"{label}_{flag.value}"
                try:
                    result = permanent_effect_regression(panel, right, flag)
                except ParameterError as exc:
                    logger.warning(f"[PANEL] permanent effect {key} skipped: {exc}")
                    continue
                try:
                    crossover = skew_crossover_maturity(result)
                except (NumericError, ParameterError):
                    crossover = None
                payload[key] = dict(result.to_dict(), crossover_maturity=crossover)
        self.state.write_json(stage, "panel_permanent.json", payload)
        return {key: value['crossover_maturity'] for key, value in payload.items()}

    def handle_rnd_te(self, stage: str) -> dict:
        cfg = self.state.config.panel
        curves = curves_from_frame(self.state.read_frame(stage, DENSITIES))
        lo, hi = cfg.moneyness_range
        points = np.linspace(lo, hi, cfg.n_eval_points)
        panel = density_panel(curves, self._calendar(stage), moneyness_grid=points)
        binned = rnd_te_binned(panel, cfg.n_bins, BinMode(cfg.bin_mode), cfg.moneyness_range)
        self.state.write_frame(stage, TE_PROFILE, binned.to_frame())
        flagged = {binned.method: int(np.sum(binned.flagged))}
        for bandwidth in cfg.kernel_bandwidths:
            profile = rnd_te_kernel(panel, points, bandwidth)
            self.state.write_frame(stage, te_kernel_name(bandwidth), profile.to_frame())
            flagged[profile.method] = int(np.sum(profile.flagged))
        return {'flagged': flagged}

    def handle_fwl(self, stage: str) -> dict:
        cfg = self.state.config.panel
        panel = self._iv_panel(stage)
        m_points = np.linspace(0.5, 1.5, cfg.n_eval_points)
        t = panel['maturity'].to_numpy(float)
        t_points = np.unique(np.quantile(t, np.linspace(0.0, 1.0, 10)))
        try:
            surface = fwl_surface(panel, m_points, t_points, bandwidths=cfg.fwl_bandwidths, min_obs=cfg.fwl_min_obs)
        except ParameterError as exc:
            logger.warning(f"[PANEL] local FWL surface unavailable ({exc}); using the global linear fit")
            surface = fwl_surface(panel, m_points, t_points, mode="global_linear")
        mm, tt = np.meshgrid(surface.moneyness, surface.maturity, indexing="ij")
        frame = pd.DataFrame({'moneyness': mm.ravel(), 'maturity': tt.ravel(), 'control': surface.control.ravel(),
                              'treated': surface.treated.ravel(), 'delta': surface.delta.ravel(),
                              'sparse': surface.sparse.ravel().astype(int)})
        self.state.write_frame(stage, FWL_SURFACE, frame)
        return {'mode': surface.mode, 'sparse_cells': int(surface.sparse.sum())}

    def handle_gaps(self, stage: str) -> dict:
        results = gap_treatment_regression(self._dated(stage, GAPS))
        self.state.write_json(stage, "panel_gaps.json", {k: r.to_dict() for k, r in results.items()})
        return {k: float(r.coefs['treated']) for k, r in results.items() if 'treated' in r.coefs}

    def handle_support(self, stage: str) -> dict:
        supports = join_treatment(self._dated(stage, SUPPORTS), self._calendar(stage))
        try:
            results = support_regression(supports)
        except ParameterError as exc:
            logger.warning(f"[PANEL] support regression skipped: {exc}")
            results = {}
        self.state.write_json(stage, "panel_support.json", {k: r.to_dict() for k, r in results.items()})
        return {k: float(r.coefs['treated']) for k, r in results.items() if 'treated' in r.coefs}

    def handle_panel(self, kinds: Optional[Sequence[str]] = None) -> Dict[str, dict]:
        stage = Stage.PANEL.value
        kinds = list(kinds or PANEL_KINDS)
        out = {}
        for kind in kinds:
            if kind == 'smile':
                out[kind] = self.handle_smile(stage)
            elif kind == 'rnd-te':
                out[kind] = self.handle_rnd_te(stage)
            elif kind == 'permanent':
                out[kind] = self.handle_permanent(stage)
            elif kind == 'fwl':
                out[kind] = self.handle_fwl(stage)
            elif kind == 'gaps':
                out[kind] = self.handle_gaps(stage)
            elif kind == 'support':
                out[kind] = self.handle_support(stage)
            else:
                raise DataError(f"unknown panel analysis {kind!r}")
        return out
