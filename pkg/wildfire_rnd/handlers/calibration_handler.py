import logging
from typing import Optional, Sequence

import pandas as pd

from wildfire_rnd.core.enums import ModelKind, Stage
from wildfire_rnd.core.errors import DataError
from wildfire_rnd.core.state import RunState
from wildfire_rnd.data.artifacts import slices_from_frame
from wildfire_rnd.data.quotes_io import iv_panel, load_treatment
from wildfire_rnd.engine.jump_models import CalibrationQuotes, calibrate
from wildfire_rnd.handlers.density_handler import SLICES
from wildfire_rnd.handlers.ingest_handler import TREATMENT

logger = logging.getLogger(__name__)

GROUPS = ('control', 'treatment')
CALIBRATION_TABLE = "calibration_table.csv"


def calibration_name(model: str, group: str) -> str:
    return f"calibration_{model}_{group}.json"


class CalibrationHandler:
    def __init__(self, state: RunState = None):
        self.state = state or RunState.get_instance()

    def handle_calibrate(self, models: Optional[Sequence[str]] = None,
                         groups: Optional[Sequence[str]] = None) -> dict:
        """Jump-model fits to the pooled control and treated implied-vol surfaces"""
        stage = Stage.CALIBRATE.value
        config = self.state.config
        models = list(models or config.calibration.models)
        groups = list(groups or GROUPS)
        for group in groups:
            if group not in GROUPS:
                raise DataError(f"unknown calibration group {group!r}")
        slices = slices_from_frame(self.state.read_frame(stage, SLICES))
        calendar = load_treatment(str(self.state.require(stage, TREATMENT)))
        panel = iv_panel(slices, calendar, maturity_unit="years")

        rows, results = [], {}
        for group in groups:
            sub = panel[panel['treated_now'] == (1 if group == 'treatment' else 0)]
            if sub.empty:
                logger.warning(f"[CALIBRATE] no {group} quotes; group skipped")
                continue
            quotes = CalibrationQuotes(moneyness=sub['moneyness'].to_numpy(float),
                                       maturities=sub['maturity'].to_numpy(float), ivs=sub['iv'].to_numpy(float))
            for model in models:
                kind = ModelKind(model)
                result = calibrate(kind, quotes, bounds=config.calibration.bounds.get(kind.value),
                                   n_starts=config.calibration.n_starts, seed=config.seed)
                self.state.write_json(stage, calibration_name(kind.value, group), result.to_dict())
                rows.append(dict(model=kind.value, group=group, n_quotes=result.n_quotes,
                                 converged=int(result.converged), **result.to_table_row()))
                results[f"{kind.value}/{group}"] = result.mse
        self.state.write_frame(stage, CALIBRATION_TABLE, pd.DataFrame(rows))
        return {'mse': results}
