"""Stage dispatcher: runs pipeline stages in order, commits their artifacts and writes the manifest."""
import asyncio
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from wildfire_rnd.core.config import RunConfig
from wildfire_rnd.core.enums import Stage
from wildfire_rnd.core.errors import DependencyError, ParameterError, WildfireRndError
from wildfire_rnd.core.state import RunState
from wildfire_rnd.engine.panel_metrics import FwlSurface, iv_cross_section
from wildfire_rnd.handlers.calibration_handler import CalibrationHandler
from wildfire_rnd.handlers.density_handler import DENSITIES, DensityHandler
from wildfire_rnd.handlers.garch_handler import GarchHandler
from wildfire_rnd.handlers.ingest_handler import IngestHandler
from wildfire_rnd.handlers.kernel_handler import KERNELS, KernelHandler
from wildfire_rnd.handlers.panel_handler import FWL_SURFACE, TE_PROFILE, PanelHandler

logger = logging.getLogger(__name__)

STAGE_ORDER = list(Stage)
PLOT_KINDS = ('density_surface', 'te_profile', 'kernel_curve', 'iv_cross_section')
NUMERIC_EXIT = 4


@dataclass
class RunOutcome:
    exit_code: int
    manifest: dict
    summaries: Dict[str, dict] = field(default_factory=dict)
    failed_stage: Optional[str] = None


def parse_stages(text: Optional[str]) -> Tuple[Stage, ...]:
    """Comma-separated stage names in any order; run order is always the pipeline order"""
    if not text:
        return tuple(STAGE_ORDER)
    try:
        wanted = {Stage(name.strip()) for name in text.split(",") if name.strip()}
    except ValueError as exc:
        raise ParameterError(f"unknown stage: {exc}")
    return tuple(s for s in STAGE_ORDER if s in wanted)


class Pipeline:
    def __init__(self, config: RunConfig, state: RunState = None):
        self.state = (state or RunState.get_instance()).configure(config)
        self.ingest_handler = IngestHandler(self.state)
        self.density_handler = DensityHandler(self.state)
        self.garch_handler = GarchHandler(self.state)
        self.kernel_handler = KernelHandler(self.state)
        self.calibration_handler = CalibrationHandler(self.state)
        self.panel_handler = PanelHandler(self.state)

    def dispatch(self, stage: Stage, options: dict) -> dict:
        """Route one stage to its handler"""
        if stage is Stage.INGEST:
            return self.ingest_handler.handle_ingest()

        elif stage is Stage.DEAMERICANIZE:
            return self.density_handler.handle_deamericanize()

        elif stage is Stage.REPAIR:
            return self.density_handler.handle_repair()

        elif stage is Stage.RND:
            return self.density_handler.handle_rnd()

        elif stage is Stage.GARCH:
            step = options.get('garch', 'all')
            summary = {}
            if step in ('fit', 'all'):
                summary['fit'] = self.garch_handler.handle_fit()
            if step in ('forecast', 'all'):
                summary['forecast'] = self.garch_handler.handle_forecast()
            return summary

        elif stage is Stage.KERNEL:
            return self.kernel_handler.handle_kernel()

        elif stage is Stage.PROP1:
            return self.kernel_handler.handle_prop1()

        elif stage is Stage.CALIBRATE:
            return self.calibration_handler.handle_calibrate(options.get('models'), options.get('groups'))

        elif stage is Stage.PANEL:
            return self.panel_handler.handle_panel(options.get('panel'))

        raise ParameterError(f"no handler for stage {stage}")

    async def run(self, stages: Iterable[Stage] = STAGE_ORDER, options: Optional[dict] = None) -> RunOutcome:
        options = options or {}
        summaries = {}
        for stage in stages:
            start = time.perf_counter()
            logger.info(f"[PIPELINE] {stage.value}: started")
            try:
                summaries[stage.value] = await asyncio.to_thread(self.dispatch, stage, options)
            except WildfireRndError as exc:
                return self._fail(stage, exc, exc.exit_code, summaries)
            except (np.linalg.LinAlgError, FloatingPointError) as exc:
                return self._fail(stage, exc, NUMERIC_EXIT, summaries)
            self.state.commit(stage.value)
            elapsed = time.perf_counter() - start
            self.state.timing[stage.value] = elapsed
            logger.info(f"[PIPELINE] {stage.value}: done in {elapsed:.2f}s")
        return RunOutcome(exit_code=0, manifest=self.state.write_manifest(), summaries=summaries)

    def _fail(self, stage: Stage, exc: Exception, code: int, summaries) -> RunOutcome:
        if isinstance(exc, DependencyError):
            logger.error(f"[PIPELINE] {exc}")
        else:
            logger.error(f"[PIPELINE] {stage.value} failed: {exc}")
        self.state.abandon(stage.value)
        return RunOutcome(exit_code=code, manifest=self.state.write_manifest(), summaries=summaries,
                          failed_stage=stage.value)


def run_pipeline(config: RunConfig, stages: Iterable[Stage] = STAGE_ORDER,
                 options: Optional[dict] = None, state: RunState = None) -> RunOutcome:
    config.validate()
    return asyncio.run(Pipeline(config, state).run(list(stages), options))


# ===== PLOT TABLES =====

def _one_slice(frame: pd.DataFrame, ticker: Optional[str], date: Optional[str]) -> pd.DataFrame:
    ticker = ticker or sorted(frame['ticker'].unique())[0]
    rows = frame[frame['ticker'] == ticker]
    date = date or sorted(rows['quote_date'].unique())[0]
    rows = rows[rows['quote_date'] == date]
    if rows.empty:
        raise ParameterError(f"no rows for {ticker} on {date}")
    return rows


def emit_plot_data(kind: str, state: RunState = None, ticker: Optional[str] = None,
                   date: Optional[str] = None, maturity: Optional[float] = None) -> Path:
    """Tidy CSV for one plot kind, written as plot_<kind>.csv in the output directory"""
    state = state or RunState.get_instance()
    stage = "plot"
    if kind == 'density_surface':
        rows = _one_slice(state.read_frame(stage, DENSITIES), ticker, date)
        table = rows[['maturity', 'grid_k', 'density']].sort_values(['maturity', 'grid_k'], kind="mergesort")
    elif kind == 'te_profile':
        table = state.read_frame(stage, TE_PROFILE)[['point', 'delta', 'ci_low', 'ci_high', 'flagged']]
    elif kind == 'kernel_curve':
        rows = _one_slice(state.read_frame(stage, KERNELS), ticker, date)
        table = rows[['maturity', 'grid_k', 'log_moneyness', 'kernel', 'log_kernel']]
    elif kind == 'iv_cross_section':
        grid = state.read_frame(stage, FWL_SURFACE).sort_values(['moneyness', 'maturity'], kind="mergesort")
        m, t = np.unique(grid['moneyness']), np.unique(grid['maturity'])
        shape = (m.size, t.size)
        surface = FwlSurface(moneyness=m, maturity=t, control=grid['control'].to_numpy(float).reshape(shape),
                             treated=grid['treated'].to_numpy(float).reshape(shape),
                             sparse=grid['sparse'].to_numpy(bool).reshape(shape))
        table = iv_cross_section(surface, float(np.median(t)) if maturity is None else maturity)
    else:
        raise ParameterError(f"unknown plot kind {kind!r}; expected one of {', '.join(PLOT_KINDS)}")
    path = state.path(f"plot_{kind}.csv")
    table.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"[PIPELINE] {kind}: {len(table)} rows written to {path}")
    return path
