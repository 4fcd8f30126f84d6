import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import lognorm

from wildfire_rnd.core.enums import DensityKind
from wildfire_rnd.core.errors import NumericError, ParameterError
from wildfire_rnd.core.models import DensityCurve
from wildfire_rnd.engine.kernel_ra import (PortfolioDecomposition, PricingKernelCurve, RiskAversionEstimate,
                                           estimate_gamma_w, gamma_from_gamma_w, implied_portfolio_share,
                                           kernel_panel, merton_optimal_shares, pricing_kernel,
                                           summarize_risk_aversion, verify_prop1_mc)

GRID = np.linspace(60.0, 160.0, 101)
PROP1 = dict(q=0.5, q_w=0.1, beta=0.8, sigma=0.15, sigma_w=0.3, gamma=4.0)


def _lognormal_curve(drift, vol=0.1, maturity=1.0, rate=0.01, kind=DensityKind.RISK_NEUTRAL, grid=GRID):
    dist = lognorm(s=vol * np.sqrt(maturity), scale=100.0 * np.exp((drift - 0.5 * vol ** 2) * maturity))
    return DensityCurve(grid=grid, values=dist.pdf(grid), maturity=maturity,
                        discount=np.exp(-rate * maturity), kind=kind, forward=100.0 * np.exp(rate * maturity),
                        ticker="SYN", quote_date=100)


@pytest.fixture
def power_kernel():
    """Lognormal Q and P with mu - r = 0.04 and sigma = 0.1, so the kernel is S^-4"""
    rnd = _lognormal_curve(0.01)
    phys = _lognormal_curve(0.05, kind=DensityKind.PHYSICAL)
    return pricing_kernel(rnd, phys)


# =============================================================================
# KERNELS AND GAMMA_W
# =============================================================================

class TestPricingKernel:

    def test_power_utility_slope(self, power_kernel):
        estimate = estimate_gamma_w(power_kernel)
        assert_allclose(estimate.gamma_w, 4.0, atol=1e-8)
        assert estimate.n_points == GRID.size
        assert not estimate.puzzle
        assert estimate.method == "single"

    def test_kernel_is_discounted_ratio(self, power_kernel):
        rnd = _lognormal_curve(0.01)
        phys = _lognormal_curve(0.05, kind=DensityKind.PHYSICAL)
        assert_allclose(power_kernel.values, np.exp(0.01) * rnd.values / phys.values, rtol=1e-12)
        assert_allclose(power_kernel.log_moneyness, np.log(GRID / rnd.forward))
        assert power_kernel.n_dropped == 0

    def test_grids_must_match(self):
        rnd = _lognormal_curve(0.01)
        phys = _lognormal_curve(0.05, kind=DensityKind.PHYSICAL, grid=np.linspace(61.0, 161.0, 101))
        with pytest.raises(ParameterError):
            pricing_kernel(rnd, phys)

    def test_thin_overlap_is_numeric_error(self):
        rnd = _lognormal_curve(0.01)
        phys = _lognormal_curve(0.05, kind=DensityKind.PHYSICAL)
        phys.values[5:] = 0.0
        with pytest.raises(NumericError):
            pricing_kernel(rnd, phys)

    def test_points_below_floor_are_dropped(self):
        rnd = _lognormal_curve(0.01)
        phys = _lognormal_curve(0.05, kind=DensityKind.PHYSICAL)
        phys.values[:20] = 0.0
        kernel = pricing_kernel(rnd, phys)
        assert kernel.n_dropped == 20
        assert kernel.grid[0] == GRID[20]

    def test_kernel_must_be_positive(self):
        with pytest.raises(NumericError):
            PricingKernelCurve(grid=GRID[:3], values=np.array([1.0, 0.0, 2.0]), log_moneyness=np.zeros(3))

    def test_increasing_kernel_is_a_puzzle(self):
        kernel = PricingKernelCurve(grid=GRID, values=GRID ** 2, log_moneyness=np.log(GRID / 100.0))
        estimate = estimate_gamma_w(kernel)
        assert_allclose(estimate.gamma_w, -2.0, atol=1e-10)
        assert estimate.puzzle


class TestPooledGammaW:

    @pytest.fixture
    def kernels(self):
        rng = np.random.default_rng(7)
        out = []
        for firm in ("A", "B"):
            for date in (10, 11):
                for maturity in (0.25, 0.5):
                    values = np.exp(rng.normal()) * GRID ** -4.0
                    out.append(PricingKernelCurve(grid=GRID, values=values, log_moneyness=np.log(GRID / 100.0),
                                                  ticker=firm, quote_date=date, maturity=maturity))
        return out

    def test_pooled_slope(self, kernels):
        estimate = estimate_gamma_w(kernels, pooled=True)
        assert_allclose(estimate.gamma_w, 4.0, atol=1e-6)
        assert estimate.method == "pooled"
        assert estimate.n_points == len(kernels) * GRID.size

    def test_panel_assigns_maturity_bins(self, kernels):
        panel = kernel_panel(kernels)
        assert set(panel['maturity_bin']) == {0, 1}
        assert panel.groupby('maturity')['maturity_bin'].nunique().eq(1).all()

    def test_several_kernels_need_pooling(self, kernels):
        with pytest.raises(ParameterError):
            estimate_gamma_w(kernels)

    def test_empty(self):
        with pytest.raises(ParameterError):
            estimate_gamma_w([])


# =============================================================================
# INVERSIONS
# =============================================================================

class TestInversions:

    @pytest.mark.parametrize("gamma_w, exposure, expected", [(6.19, 0.025494, 242.8), (4.56, 0.025503, 178.8)])
    def test_reported_risk_aversion(self, gamma_w, exposure, expected):
        assert abs(gamma_from_gamma_w(gamma_w, exposure) - expected) < 0.1

    def test_zero_exposure_is_unidentified(self):
        with pytest.raises(NumericError):
            gamma_from_gamma_w(1.0, 0.0)

    def test_share_from_uncorrelated_stock(self):
        share = implied_portfolio_share(0.4, 4.0, 0.0, 0.15, 0.3, 0.5)
        assert_allclose(share.q_w, 0.1, atol=1e-15)
        assert not share.negative

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            decomp = PortfolioDecomposition(q=rng.uniform(0.0, 1.0), q_w=rng.uniform(0.0, 0.5),
                                            beta=rng.uniform(-1.0, 2.0), sigma=rng.uniform(0.05, 0.4),
                                            sigma_w=rng.uniform(0.05, 0.6))
            gamma_w = rng.uniform(0.5, 20.0)
            gamma = gamma_from_gamma_w(gamma_w, decomp)
            if gamma <= 0:
                continue
            share = implied_portfolio_share(gamma_w, gamma, decomp.rho, decomp.sigma, decomp.sigma_w, decomp.q)
            assert abs(share.q_w - decomp.q_w) < 1e-12

    def test_small_gamma_w_gives_negative_share(self):
        decomp = PortfolioDecomposition(**{k: v for k, v in PROP1.items() if k != 'gamma'})
        share = implied_portfolio_share(0.1, 4.0, decomp.rho, decomp.sigma, decomp.sigma_w, decomp.q)
        assert share.q_w < 0 and share.negative

    def test_merton_shares(self):
        q, q_w = merton_optimal_shares(mu=0.07, alpha=0.01, beta=0.8, sigma=0.15, sigma_w=0.3, r=0.02, gamma=4.0)
        assert_allclose([q, q_w], [0.45333, 0.12778], atol=1e-5)

    def test_merton_shares_edge_cases(self):
        _, q_w = merton_optimal_shares(mu=0.07, alpha=0.02 - 0.8 * 0.07, beta=0.8, sigma=0.15, sigma_w=0.3,
                                       r=0.02, gamma=4.0)
        assert abs(q_w) < 1e-15
        q, q_w = merton_optimal_shares(mu=0.02, alpha=0.05, beta=0.8, sigma=0.15, sigma_w=0.3, r=0.02, gamma=4.0)
        assert_allclose(q, -q_w * 0.8)

    def test_decomposition_slopes(self):
        decomp = PortfolioDecomposition(**PROP1)
        assert_allclose(decomp.rho, 0.37139, atol=1e-5)
        assert_allclose(decomp.closed_form_slope, -0.77139, atol=1e-5)
        assert_allclose(decomp.projection_slope, -0.74483, atol=1e-5)

    def test_summary(self):
        summary = summarize_risk_aversion([1.0, 2.0, 3.0, 4.0, np.nan], shares=[-0.1, 0.5, 1.2, 0.3])
        assert summary['n'] == 4
        assert summary['mean'] == pytest.approx(2.5)
        assert summary['median'] == pytest.approx(2.5)
        assert summary['share_in_unit_interval'] == pytest.approx(0.5)
        with pytest.raises(ParameterError):
            summarize_risk_aversion([np.nan])

    def test_estimate_to_dict(self):
        record = RiskAversionEstimate(gamma_w=-1.0, se=0.4, t_stat=-2.5, n_points=30).to_dict()
        assert record['puzzle'] and record['puzzle_significant']


# =============================================================================
# MONTE CARLO CHECK
# =============================================================================

class TestProp1MonteCarlo:

    @pytest.fixture
    def mc_args(self):
        return dict(PROP1, mu=0.07, alpha=0.01, r=0.02, T=1.0)

    def test_slope_matches_projection(self, mc_args):
        report = verify_prop1_mc(**mc_args, n_paths=200_000, seed=1)
        assert report.covers_projection
        assert abs(report.slope - report.closed_form_slope) > 3.0 * report.se
        assert report.ci_low < report.slope < report.ci_high
        assert len(report.block_slopes) == 8
        assert report.n_paths == 200_000

    def test_workers_do_not_change_result(self, mc_args):
        serial = verify_prop1_mc(**mc_args, n_paths=100_000, seed=5, workers=1)
        threaded = verify_prop1_mc(**mc_args, n_paths=100_000, seed=5, workers=4)
        assert serial.slope == threaded.slope
        assert serial.block_slopes == threaded.block_slopes

    def test_minimum_paths(self, mc_args):
        with pytest.raises(ParameterError):
            verify_prop1_mc(**mc_args, n_paths=50_000)

    @pytest.mark.slow
    def test_coverage_over_seeds(self, mc_args):
        misses = sum(not verify_prop1_mc(**mc_args, n_paths=1_000_000, seed=s, workers=4).covers_projection
                     for s in range(100))
        assert misses <= 5
