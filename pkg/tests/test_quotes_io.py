import numpy as np
import pytest
from numpy.testing import assert_allclose

from wildfire_rnd.core.enums import ExposureMeasure, SnapshotMode
from wildfire_rnd.core.errors import DataError, ParameterError
from wildfire_rnd.core.models import ExposureRecord, FireEvent, OptionQuote, SurfaceSlice, TreatmentCalendar, to_day
from wildfire_rnd.data.quotes_io import (compute_treatment, iv_panel, load_exposures, load_quotes, load_returns,
                                         load_treatment, quotes_to_slices, write_quotes, write_treatment)
from wildfire_rnd.data.synthetic import synth_surface

HEADER = "ticker,quote_date,expiry,strike,cp_flag,bid,ask,forward,rate,div_yield,iv\n"
DAYS = [to_day(f"2017-10-{d:02d}") for d in range(1, 11)]


def _write(path, text):
    path.write_text(text)
    return str(path)


def _fire(zip_code, first, last):
    return FireEvent(zip=zip_code, start_date=DAYS[first], end_date=DAYS[last])


def _treated_days(calendar, ticker):
    return [c.date for c in calendar if c.ticker == ticker and c.treated_now]


# =============================================================================
# QUOTES
# =============================================================================

class TestLoadQuotes:

    def test_single_row(self, tmp_path):
        path = _write(tmp_path / "q.csv", HEADER + "ACME,2017-10-12,2017-11-17,40,C,1.10,1.20,42.5,0.01,0.0,\n")
        result = load_quotes(path)
        assert len(result) == 1 and not result.rejects
        quote = result.records[0]
        assert quote.mid == pytest.approx(1.15)
        assert quote.is_call and quote.iv_raw is None
        assert quote.maturity_years == pytest.approx(36 / 365.0)

    def test_crossed_quote_rejected(self, tmp_path):
        path = _write(tmp_path / "q.csv", HEADER + "ACME,2017-10-12,2017-11-17,40,C,2,1,42.5,0.01,0.0,\n")
        result = load_quotes(path)
        assert not result.records
        assert result.rejects[0].row == 2
        assert "ask" in result.rejects[0].reason

    def test_valid_rows_survive_a_bad_one(self, tmp_path):
        rows = ["ACME,2017-10-12,2017-11-17,40,C,1.10,1.20,42.5,0.01,0.0,0.31",
                "ACME,2017-10-12,2017-11-17,45,C,0.30,0.40,42.5,0.01,0.0,",
                "ACME,2017-10-12,not-a-date,45,C,0.30,0.40,42.5,0.01,0.0,",
                "ACME,2017-10-12,2017-11-17,35,P,0.20,0.25,42.5,0.01,0.0,"]
        result = load_quotes(_write(tmp_path / "q.csv", HEADER + "\n".join(rows) + "\n"))
        assert len(result) == 3
        assert [r.row for r in result.rejects] == [4]
        assert result.records[0].iv_raw == pytest.approx(0.31)

    def test_unknown_cp_flag_rejected(self, tmp_path):
        rows = ["ACME,2017-10-12,2017-11-17,40,c,1.10,1.20,42.5,0.01,0.0,",
                "ACME,2017-10-12,2017-11-17,45,X,0.30,0.40,42.5,0.01,0.0,",
                "ACME,2017-10-12,2017-11-17,50,call,0.10,0.20,42.5,0.01,0.0,"]
        result = load_quotes(_write(tmp_path / "q.csv", HEADER + "\n".join(rows) + "\n"))
        assert len(result) == 1 and result.records[0].is_call
        assert [r.row for r in result.rejects] == [3, 4]
        assert all("cp_flag" in r.reason for r in result.rejects)

    @pytest.mark.parametrize("row", ["ACME,2017-10-12,2017-11-17,nan,C,1.10,1.20,42.5,0.01,0.0,",
                                     "ACME,2017-10-12,2017-11-17,40,C,nan,nan,42.5,0.01,0.0,",
                                     "ACME,2017-10-12,2017-11-17,40,C,1.10,inf,nan,0.01,0.0,",
                                     "ACME,2017-10-12,2017-11-17,40,C,1.10,1.20,42.5,0.01,0.0,nan"])
    def test_non_finite_fields_rejected(self, tmp_path, row):
        result = load_quotes(_write(tmp_path / "q.csv", HEADER + row + "\n"))
        assert not result.records
        assert result.rejects[0].row == 2
        assert "not finite" in result.rejects[0].reason

    def test_write_then_load_keeps_every_quote(self, tmp_path):
        quotes = [OptionQuote("ACME", DAYS[0], DAYS[0] + 36, 40.0, True, 1.1, 1.2, 42.5, 0.01, 0.0, 0.31),
                  OptionQuote("ACME", DAYS[0], DAYS[0] + 36, 35.0, False, 0.2, 0.25, 42.5, 0.01, 0.0),
                  OptionQuote("BETA", DAYS[2], DAYS[2] + 400, 12.5, True, 0.0, 0.05, 11.75, 0.025, 0.015)]
        path = str(tmp_path / "quotes.csv")
        write_quotes(quotes, path)
        result = load_quotes(path)
        assert not result.rejects
        assert result.records == quotes
        assert result.lines == [2, 3, 4]

    def test_slice_with_missing_strike_raises(self):
        with pytest.raises(DataError, match="finite"):
            SurfaceSlice("ACME", DAYS[0], DAYS[0] + 365, 1.0, [90.0, np.nan, 110.0], [12.0, 6.0, 3.0], 100.0, 0.02)
        with pytest.raises(DataError):
            SurfaceSlice("ACME", DAYS[0], DAYS[0] + 365, 1.0, [90.0, 110.0], [12.0, 3.0], np.nan, 0.02)

    def test_missing_column_is_fatal(self, tmp_path):
        with pytest.raises(DataError):
            load_quotes(_write(tmp_path / "q.csv", "ticker,strike\nACME,40\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_quotes(str(tmp_path / "absent.csv"))


# =============================================================================
# EXPOSURES AND TREATMENT
# =============================================================================

class TestTreatment:

    def test_single_measure_over_threshold(self):
        exposures = [ExposureRecord("EMP", "90001", 0.0, 0.12, 0.0)]
        calendar = compute_treatment(exposures, [_fire("90001", 2, 3)], DAYS)
        assert _treated_days(calendar, "EMP") == DAYS[2:4]

    def test_measures_are_not_added_together(self):
        exposures = [ExposureRecord("MIX", "90001", 0.06, 0.0, 0.06)]
        calendar = compute_treatment(exposures, [_fire("90001", 0, 9)], DAYS)
        assert _treated_days(calendar, "MIX") == []

    def test_shares_add_across_burning_zips(self):
        exposures = [ExposureRecord("TWO", "90001", 0.0, 0.06, 0.0), ExposureRecord("TWO", "90002", 0.0, 0.06, 0.0)]
        fires = [_fire("90001", 1, 5), _fire("90002", 4, 8)]
        assert _treated_days(compute_treatment(exposures, fires, DAYS), "TWO") == DAYS[4:6]

    def test_unexposed_firm_never_treated(self):
        exposures = [ExposureRecord("NONE", "90001", 0.0, 0.0, 0.0), ExposureRecord("EMP", "90001", 0.0, 0.5, 0.0)]
        calendar = compute_treatment(exposures, [_fire("90001", 0, 9)], DAYS)
        assert not any(c.treated_now or c.after_first for c in calendar if c.ticker == "NONE")
        assert len(calendar) == 2 * len(DAYS)

    def test_persistent_flags(self):
        exposures = [ExposureRecord("EMP", "90001", 0.2, 0.0, 0.0)]
        fires = [_fire("90001", 2, 3), _fire("90001", 7, 7)]
        calendar = {c.date: c for c in compute_treatment(exposures, fires, DAYS)}
        assert [calendar[d].after_first for d in DAYS] == [False] * 2 + [True] * 8
        assert [calendar[d].after_last for d in DAYS] == [False] * 7 + [True] * 3
        assert all(c.after_first for c in calendar.values() if c.treated_now)

    def test_unknown_fire_zip_ignored(self):
        exposures = [ExposureRecord("EMP", "90001", 0.2, 0.0, 0.0)]
        calendar = compute_treatment(exposures, [_fire("11111", 0, 9)], DAYS)
        assert _treated_days(calendar, "EMP") == []

    @pytest.mark.parametrize("threshold", [0.0, 1.5])
    def test_threshold_range(self, threshold):
        with pytest.raises(ParameterError):
            compute_treatment([], [], DAYS, threshold=threshold)

    def test_snapshot_selection(self):
        exposures = [ExposureRecord("YR", "90001", 0.0, 0.3, 0.0, year=2016),
                     ExposureRecord("YR", "90001", 0.0, 0.0, 0.0, year=2018)]
        fires = [_fire("90001", 0, 9)]
        latest = compute_treatment(exposures, fires, DAYS, snapshot=SnapshotMode.LATEST)
        contemporaneous = compute_treatment(exposures, fires, DAYS, snapshot="contemporaneous")
        assert _treated_days(latest, "YR") == []
        assert _treated_days(contemporaneous, "YR") == DAYS

    def test_exposures_summing_above_one_rejected(self, tmp_path):
        text = ("ticker,zip,share_estabs,share_emp,share_sales\n"
                "OVER,90001,0.1,0.6,0.1\nOVER,90002,0.1,0.6,0.1\nOK,90001,0.2,0.2,0.2\n")
        result = load_exposures(_write(tmp_path / "e.csv", text))
        assert [r.ticker for r in result.records] == ["OK"]
        assert [r.row for r in result.rejects] == [2, 3]
        assert result.lines == [4]

    def test_non_finite_share_rejected(self, tmp_path):
        text = "ticker,zip,share_estabs,share_emp,share_sales\nBAD,90001,nan,0.2,0.2\nOK,90001,0.1,0.1,0.1\n"
        result = load_exposures(_write(tmp_path / "e.csv", text))
        assert [r.ticker for r in result.records] == ["OK"]
        assert result.rejects[0].row == 2 and "share_estabs" in result.rejects[0].reason

    def test_shares_follow_measure_order(self):
        record = ExposureRecord("EMP", "90001", 0.1, 0.2, 0.3)
        assert_allclose(record.shares(), [0.1, 0.2, 0.3])
        assert record.share(ExposureMeasure.SALES) == 0.3
        assert record.share("share_emp") == 0.2

    def test_treatment_ignores_row_order_and_reruns(self):
        exposures = [ExposureRecord("EMP", "90001", 0.0, 0.08, 0.0), ExposureRecord("EMP", "90002", 0.0, 0.04, 0.0),
                     ExposureRecord("EST", "90002", 0.15, 0.0, 0.0), ExposureRecord("LOW", "90003", 0.05, 0.05, 0.05)]
        fires = [_fire("90001", 1, 4), _fire("90002", 3, 6), _fire("90003", 0, 9)]
        reference = compute_treatment(exposures, fires, DAYS)
        assert compute_treatment(exposures, fires, DAYS) == reference
        rng = np.random.default_rng(7)
        for _ in range(5):
            shuffled_exposures = [exposures[i] for i in rng.permutation(len(exposures))]
            shuffled_fires = [fires[i] for i in rng.permutation(len(fires))]
            shuffled_days = [DAYS[i] for i in rng.permutation(len(DAYS))]
            assert compute_treatment(shuffled_exposures, shuffled_fires, shuffled_days) == reference

    def test_share_outside_unit_interval_rejected(self, tmp_path):
        text = "ticker,zip,share_estabs,share_emp,share_sales\nBAD,90001,-0.1,0.2,0.2\n"
        result = load_exposures(_write(tmp_path / "e.csv", text))
        assert not result.records and result.rejects[0].row == 2

    def test_calendar_file_round_trip(self, tmp_path):
        calendar = compute_treatment([ExposureRecord("EMP", "90001", 0.2, 0.0, 0.0)], [_fire("90001", 4, 4)], DAYS)
        path = str(tmp_path / "treatment.csv")
        write_treatment(calendar, path)
        assert load_treatment(path) == calendar


# =============================================================================
# SLICES, IV PANELS, RETURNS
# =============================================================================

class TestSlicesAndPanels:

    def _quote(self, strike, is_call, mid, forward=100.0, rate=0.02):
        return OptionQuote(ticker="ACME", quote_date=DAYS[0], expiry=DAYS[0] + 365, strike=strike,
                           is_call=is_call, bid=mid - 0.05, ask=mid + 0.05, forward=forward, rate=rate,
                           div_yield=0.0)

    def test_out_of_the_money_legs_through_parity(self):
        quotes = [self._quote(90.0, False, 2.0), self._quote(90.0, True, 13.0), self._quote(110.0, True, 3.0),
                  self._quote(110.0, False, 12.5)]
        (s,) = quotes_to_slices(quotes)
        assert_allclose(s.strikes, [90.0, 110.0])
        assert_allclose(s.calls, [2.0 + np.exp(-0.02) * 10.0, 3.0])
        assert s.maturity_years == pytest.approx(1.0)

    def test_price_override_and_min_strikes(self):
        quotes = [self._quote(90.0, False, 2.0), self._quote(110.0, True, 3.0)]
        (s,) = quotes_to_slices(quotes, prices=[2.5, 3.5])
        assert_allclose(s.calls, [2.5 + np.exp(-0.02) * 10.0, 3.5])
        assert quotes_to_slices(quotes, min_strikes=3) == []
        with pytest.raises(ParameterError):
            quotes_to_slices(quotes, prices=[1.0])

    def test_iv_panel_recovers_flat_vol(self):
        s = synth_surface(0.25, np.arange(80.0, 121.0, 5.0), 0.5, 100.0, 0.01, ticker="ACME", quote_date=DAYS[3])
        calendar = [TreatmentCalendar("ACME", DAYS[3], True, True, False)]
        panel = iv_panel([s], calendar)
        assert_allclose(panel['iv'], 0.25, atol=1e-8)
        assert_allclose(panel['maturity'], 182.5)
        assert panel.loc[panel['strike'] >= 100.0, 'right'].eq('C').all()
        assert panel.loc[panel['strike'] < 100.0, 'right'].eq('P').all()
        assert panel['treated_now'].eq(1).all()
        assert_allclose(iv_panel([s], maturity_unit="years")['maturity'], 0.5)
        with pytest.raises(ParameterError):
            iv_panel([s], maturity_unit="weeks")

    def test_load_returns_attaches_flags(self, tmp_path):
        text = ("ticker,date,log_return,market_return\n"
                "PCG,2017-10-03,0.01,0.002\nPCG,2017-10-01,-0.02,0.001\nPCG,2017-10-02,0.0,-0.003\n"
                "EIX,2017-10-01,0.004,0.001\n")
        calendar = [TreatmentCalendar("PCG", DAYS[1], True, True, True)]
        series = load_returns(_write(tmp_path / "r.csv", text), calendar)
        assert sorted(series) == ["EIX", "PCG"]
        pcg = series["PCG"]
        assert pcg.dates.tolist() == DAYS[:3]
        assert_allclose(pcg.log_returns, [-0.02, 0.0, 0.01])
        assert pcg.wildfire_flags.tolist() == [0.0, 1.0, 0.0]
        assert len(series["EIX"]) == 1

    def test_load_returns_rejects_gaps(self, tmp_path):
        text = "ticker,date,log_return,market_return\nPCG,2017-10-01,,0.001\n"
        with pytest.raises(DataError):
            load_returns(_write(tmp_path / "r.csv", text))
