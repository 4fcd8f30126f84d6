import logging

import pandas as pd

from wildfire_rnd.core.enums import SnapshotMode, Stage
from wildfire_rnd.core.state import RunState
from wildfire_rnd.data.quotes_io import (compute_treatment, load_exposures, load_fires, load_quotes,
                                         load_returns, quotes_frame, treatment_frame)

logger = logging.getLogger(__name__)

QUOTES = "quotes.csv"
TREATMENT = "treatment.csv"
REJECTS = "rejects.csv"


class IngestHandler:
    def __init__(self, state: RunState = None):
        self.state = state or RunState.get_instance()

    def handle_ingest(self) -> dict:
        """Validated quotes, reject report and the firm-day treatment calendar"""
        stage = Stage.INGEST.value
        config = self.state.config
        sources = {
            'quotes': load_quotes(str(self.state.require_input(stage, 'quotes'))),
            'exposures': load_exposures(str(self.state.require_input(stage, 'exposures'))),
            'fires': load_fires(str(self.state.require_input(stage, 'fires'))),
        }
        quotes = sources['quotes'].records
        dates = {q.quote_date for q in quotes}
        if config.paths.returns is not None:
            for series in load_returns(config.paths.returns).values():
                dates.update(int(d) for d in series.dates)

        calendar = compute_treatment(sources['exposures'].records, sources['fires'].records, dates,
                                     threshold=config.treatment.threshold,
                                     snapshot=SnapshotMode(config.treatment.snapshot))
        rejects = pd.DataFrame([dict(source=name, **r.to_dict())
                                for name, result in sources.items() for r in result.rejects],
                               columns=['source', 'row', 'reason'])

        self.state.write_frame(stage, QUOTES, quotes_frame(quotes))
        self.state.write_frame(stage, TREATMENT, treatment_frame(calendar))
        self.state.write_frame(stage, REJECTS, rejects)
        summary = {'quotes': len(quotes), 'rejects': len(rejects), 'firm_days': len(calendar),
                   'treated_firm_days': sum(c.treated_now for c in calendar)}
        logger.info(f"[INGEST] {summary}")
        return summary
