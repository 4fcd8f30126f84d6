import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from wildfire_rnd.core.enums import DensityKind, Regime
from wildfire_rnd.core.errors import DataError, NumericError, ParameterError
from wildfire_rnd.core.models import GarchWildfireParams, MarketGarchParams, ReturnSeries, TreatmentCalendar
from wildfire_rnd.data.synthetic import simulate_garch_wildfire, simulate_market_garch
from wildfire_rnd.engine.physical_density import (ForecastState, filter_state, first_event_index,
                                                  fit_garch_wildfire, fit_market_garch, forecast_density,
                                                  regime_window, simulate_terminal_prices, wildfire_hazard)


@pytest.fixture
def market():
    return MarketGarchParams(mu=2e-4, omega=1e-6, zeta=0.9, xi=0.05)


@pytest.fixture
def iid_params():
    """No dynamics at all: daily variance 1e-4, no market loading, no wildfire terms."""
    return GarchWildfireParams(alpha=0.0, beta=0.0, delta=[0.0], omega=1e-4, zeta=0.0, xi=0.0,
                               rho_vol=0.0, gamma_vol=[0.0])


def _calendar(ticker, n_days, treated_days):
    return [TreatmentCalendar(ticker=ticker, date=d, treated_now=d in treated_days,
                              after_first=False, after_last=False) for d in range(n_days)]


# =============================================================================
# HAZARD
# =============================================================================

class TestHazard:

    def test_laplace_smoothing(self):
        estimate = wildfire_hazard(_calendar("PCG", 1000, {3, 40, 41, 500, 999}), "PCG")
        assert estimate.probability == pytest.approx(6.0 / 1002.0)
        assert (estimate.n_treated, estimate.n_days) == (5, 1000)
        assert not estimate.degenerate

    def test_empty_history_is_degenerate(self):
        estimate = wildfire_hazard(_calendar("PCG", 10, set()), "EIX")
        assert estimate.probability == 0.5
        assert estimate.degenerate


# =============================================================================
# MARKET GARCH
# =============================================================================

class TestMarketGarch:

    def test_recovers_parameters(self, market):
        returns, _ = simulate_market_garch(market, 20000, seed=11)
        fit = fit_market_garch(returns)
        for name in ('omega', 'zeta', 'xi'):
            estimate, truth = getattr(fit.params, name), getattr(market, name)
            assert abs(estimate - truth) <= 3.0 * fit.se[name], name
        assert fit.loglik >= fit.loglik_start
        assert fit.grad_norm <= 1e-6

    def test_iid_returns(self):
        rng = np.random.default_rng(5)
        returns = 1e-3 + 0.01 * rng.standard_normal(2000)
        fit = fit_market_garch(returns)
        iid = -0.5 * returns.size * (np.log(2.0 * np.pi) + np.log(np.var(returns)) + 1.0)
        assert fit.params.xi < 0.05
        assert iid - 0.5 <= fit.loglik <= iid + 10.0
        assert fit.loglik >= fit.loglik_start

    def test_constant_series_is_an_error(self):
        with pytest.raises(NumericError):
            fit_market_garch(np.full(300, 0.25))

    def test_short_series_is_an_error(self):
        with pytest.raises(DataError):
            fit_market_garch(np.random.default_rng(0).standard_normal(100))


# =============================================================================
# GARCH-WILDFIRE
# =============================================================================

class TestGarchWildfire:

    def test_recovers_wildfire_terms(self, market):
        truth = GarchWildfireParams(alpha=1e-4, beta=0.8, delta=[-0.03], omega=1e-6, zeta=0.9, xi=0.05,
                                    rho_vol=0.05, gamma_vol=[5e-5])
        series = simulate_garch_wildfire(truth, market, 20000, n_fires=40, seed=21)
        market_fit = fit_market_garch(series.market_returns)
        fit = fit_garch_wildfire(series, market_fit.params)
        assert not fit.unidentified
        assert abs(fit.params.delta[0] - truth.delta[0]) <= 3.0 * fit.se['delta'][0]
        assert abs(fit.params.gamma_vol[0] - truth.gamma_vol[0]) <= 3.0 * fit.se['gamma_vol'][0]
        assert abs(fit.params.beta - truth.beta) <= 3.0 * fit.se['beta']
        assert fit.loglik >= fit.loglik_start

    def test_no_wildfire_days_is_unidentified(self, market):
        truth = GarchWildfireParams(alpha=0.0, beta=0.8, delta=[0.0], omega=1e-6, zeta=0.9, xi=0.05,
                                    rho_vol=0.0, gamma_vol=[0.0])
        series = simulate_garch_wildfire(truth, market, 3000, n_fires=0, seed=4)
        fit = fit_garch_wildfire(series, market)
        assert fit.unidentified
        assert_allclose(fit.params.delta, [0.0])
        assert_allclose(fit.params.gamma_vol, [0.0])
        assert np.isnan(fit.se['delta'][0])
        assert fit.loglik >= fit.loglik_start
        assert abs(fit.params.beta - 0.8) <= 3.0 * fit.se['beta']

    def test_regime_windows(self, market, iid_params):
        flags = np.zeros(600)
        flags[400] = 1.0
        series = simulate_garch_wildfire(iid_params, market, 600, flags=flags, seed=2)
        event = first_event_index(series)
        assert event == 400
        assert len(regime_window(series, Regime.MYOPIC, event)) == 400
        assert len(regime_window(series, Regime.FORESIGHT, event, foresight_window=150)) == 150
        assert len(regime_window(series, Regime.STATIONARY, event)) == 600
        assert len(regime_window(series, Regime.MYOPIC, None)) == 600

    def test_filter_state_bounds(self, market, iid_params):
        series = simulate_garch_wildfire(iid_params, market, 300, seed=1)
        state = filter_state(iid_params, market, series, 299, price=50.0)
        assert state.price == 50.0 and state.stock_variance > 0
        with pytest.raises(ParameterError):
            filter_state(iid_params, market, series, 300, price=50.0)

    def test_misaligned_series_rejected(self):
        with pytest.raises(DataError):
            ReturnSeries("X", np.arange(3), np.zeros(3), np.zeros(2), np.zeros(3))


# =============================================================================
# SIMULATION AND DENSITY
# =============================================================================

class TestForecast:

    def test_static_model_gives_normal_log_price(self, market, iid_params):
        state = ForecastState(price=100.0, stock_variance=1e-4, stock_residual=0.0,
                              market_variance=1e-4, market_residual=0.0)
        prices = simulate_terminal_prices(iid_params, market, state, 20, 100_000, hazard=0.0, seed=9)
        log_change = np.log(prices / 100.0)
        ks = stats.kstest(log_change, stats.norm(scale=np.sqrt(20 * 1e-4)).cdf).statistic
        assert ks <= 0.01

    def test_wildfire_hazard_lowers_mean(self, market):
        params = GarchWildfireParams(alpha=0.0, beta=0.0, delta=[-0.05], omega=1e-4, zeta=0.0, xi=0.0,
                                     rho_vol=0.0, gamma_vol=[0.0])
        state = ForecastState(price=100.0, stock_variance=1e-4, stock_residual=0.0,
                              market_variance=1e-4, market_residual=0.0)
        calm = simulate_terminal_prices(params, market, state, 20, 20_000, hazard=0.0, seed=1)
        fiery = simulate_terminal_prices(params, market, state, 20, 20_000, hazard=0.5, seed=1)
        assert np.mean(np.log(fiery)) < np.mean(np.log(calm))

    def test_density_mass_on_wide_grid(self, market, iid_params):
        state = ForecastState(price=100.0, stock_variance=1e-4, stock_residual=0.0,
                              market_variance=1e-4, market_residual=0.0)
        sd = 100.0 * np.sqrt(20 * 1e-4)
        grid = np.linspace(100.0 - 6 * sd, 100.0 + 6 * sd, 200)
        curve = forecast_density(iid_params, market, state, 20, 20_000, Regime.STATIONARY, 0.0, grid,
                                 seed=3, ticker="SYN")
        assert curve.mass >= 0.95
        assert curve.kind is DensityKind.PHYSICAL
        assert curve.maturity == pytest.approx(20 / 252.0)

    def test_density_is_reproducible(self, market, iid_params):
        state = ForecastState(price=100.0, stock_variance=1e-4, stock_residual=0.0,
                              market_variance=1e-4, market_residual=0.0)
        grid = np.linspace(70.0, 130.0, 50)
        first = forecast_density(iid_params, market, state, 10, 10_000, Regime.STATIONARY, 0.1, grid, seed=8)
        second = forecast_density(iid_params, market, state, 10, 10_000, Regime.STATIONARY, 0.1, grid, seed=8)
        assert_allclose(first.values, second.values, rtol=0, atol=0)

    def test_bandwidth_shrinks_with_paths(self, market, iid_params):
        state = ForecastState(price=100.0, stock_variance=1e-4, stock_residual=0.0,
                              market_variance=1e-4, market_residual=0.0)
        grid = np.linspace(70.0, 130.0, 50)
        few = forecast_density(iid_params, market, state, 10, 10_000, Regime.STATIONARY, 0.0, grid, seed=5)
        many = forecast_density(iid_params, market, state, 10, 160_000, Regime.STATIONARY, 0.0, grid, seed=5)
        assert many.bandwidth / few.bandwidth == pytest.approx(16.0 ** -0.2, rel=0.03)

    def test_minimum_paths(self, market, iid_params):
        state = ForecastState(price=100.0, stock_variance=1e-4, stock_residual=0.0,
                              market_variance=1e-4, market_residual=0.0)
        with pytest.raises(ParameterError):
            forecast_density(iid_params, market, state, 10, 5_000, Regime.STATIONARY, 0.0,
                             np.linspace(80.0, 120.0, 20))

    def test_hazard_range(self, market, iid_params):
        state = ForecastState(price=100.0, stock_variance=1e-4, stock_residual=0.0,
                              market_variance=1e-4, market_residual=0.0)
        with pytest.raises(ParameterError):
            simulate_terminal_prices(iid_params, market, state, 5, 100, hazard=1.5)


@pytest.mark.slow
def test_wildfire_recovery_coverage(market):
    """Over repeated simulations the 3-SE interval for delta covers the truth in most trials."""
    truth = GarchWildfireParams(alpha=1e-4, beta=0.8, delta=[-0.03], omega=1e-6, zeta=0.9, xi=0.05,
                                rho_vol=0.05, gamma_vol=[5e-5])
    hits = 0
    for seed in range(100):
        series = simulate_garch_wildfire(truth, market, 20000, n_fires=40, seed=1000 + seed)
        fit = fit_garch_wildfire(series, fit_market_garch(series.market_returns).params)
        hits += abs(fit.params.delta[0] - truth.delta[0]) <= 3.0 * fit.se['delta'][0]
    assert hits >= 95
