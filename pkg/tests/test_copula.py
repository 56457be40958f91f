import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tiltgmm import simulation as sim
from tiltgmm.copula import (
    ALPHA_FLOOR,
    RATIO_CAP,
    CopulaSummary,
    DensitySummary,
    Grid,
    GridConfig,
    MarginalSummary,
    PiecewiseLinearCDF,
    clayton_cdf,
    clayton_density,
    density_ratio,
    empirical_marginals,
    fit_clayton,
    interpolate_cdf,
    make_grid,
    pseudo_observations,
    reconstruct_density,
    sample_clayton,
    sample_synthetic,
    summarize_density,
    tilt_ratios,
)
from tiltgmm.exceptions import DensityError
from tiltgmm.protocol import decode_payload, encode_payload, site_export


def gauss_legendre_unit_square(n=200):
    t, w = np.polynomial.legendre.leggauss(n)
    x, w = (t + 1) / 2, w / 2
    U, V = np.meshgrid(x, x)
    return np.stack([U, V], axis=-1), np.outer(w, w)


def kendall_tau(u):
    return stats.kendalltau(u[:, 0], u[:, 1])[0]


class TestClaytonCdf:
    def test_closed_form_value(self):
        assert clayton_cdf([0.5, 0.5], 1.0) == 1.0 / 3.0

    def test_independence_limit(self):
        assert clayton_cdf([0.3, 0.7], 1e-6) == pytest.approx(0.21, abs=1e-6)

    @pytest.mark.parametrize("alpha", [0.3, 1.0, 4.0])
    def test_uniform_margin(self, alpha):
        # a coordinate equal to 1 drops out
        assert clayton_cdf([0.4, 1.0], alpha) == pytest.approx(0.4, rel=1e-14)
        assert clayton_cdf([0.4, 1.0, 0.6], alpha) == pytest.approx(
            clayton_cdf([0.4, 0.6], alpha), rel=1e-14)

    @given(st.floats(0.05, 10), st.floats(0.01, 0.99), st.floats(0.01, 0.99),
           st.floats(0.0, 0.5))
    @settings(max_examples=200, deadline=None)
    def test_nondecreasing_in_each_coordinate(self, alpha, u, v, step):
        lo = clayton_cdf([u, v], alpha)
        assert clayton_cdf([min(u + step, 1.0), v], alpha) >= lo - 1e-15
        assert clayton_cdf([u, min(v + step, 1.0)], alpha) >= lo - 1e-15


class TestClaytonDensity:
    def test_closed_form_value(self):
        assert clayton_density(np.array([0.5, 0.5]), 1.0) == pytest.approx(32 / 27, rel=1e-14)

    def test_independence(self, rng):
        u = rng.uniform(0.01, 0.99, size=(1000, 2))
        np.testing.assert_allclose(clayton_density(u, 1e-6), 1.0, atol=1e-3)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0])
    def test_integrates_to_one(self, alpha):
        nodes, weights = gauss_legendre_unit_square(200)
        assert np.sum(clayton_density(nodes, alpha) * weights) == pytest.approx(1.0, abs=1e-3)

    def test_matches_mixed_derivative_of_cdf(self):
        u, h = np.array([0.3, 0.6]), 1e-4
        c = lambda a, b: clayton_cdf([a, b], 2.0)  # noqa: E731
        fd = (c(u[0] + h, u[1] + h) - c(u[0] + h, u[1] - h) - c(u[0] - h, u[1] + h)
              + c(u[0] - h, u[1] - h)) / (4 * h * h)
        assert clayton_density(u, 2.0) == pytest.approx(fd, rel=1e-6)

    def test_three_dimensional_integrates_to_one(self):
        t, w = np.polynomial.legendre.leggauss(60)
        x, w = (t + 1) / 2, w / 2
        U = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
        W = w[:, None, None] * w[None, :, None] * w[None, None, :]
        assert np.sum(clayton_density(U, 0.7) * W) == pytest.approx(1.0, abs=2e-3)


class TestSamplerAndFit:
    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0])
    def test_sampler_kendall_tau(self, alpha):
        u = sample_clayton(100_000, 2, alpha, np.random.default_rng(int(alpha * 10)))
        assert kendall_tau(u) == pytest.approx(alpha / (alpha + 2), abs=0.03)

    @pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
    def test_fit_recovers_alpha(self, alpha):
        u = sample_clayton(2000, 2, alpha, np.random.default_rng(11))
        fit = fit_clayton(pseudo_observations(u))
        assert fit.alpha == pytest.approx(alpha, abs=0.3)
        # cross-check through the tau inversion alpha = 2 tau / (1 - tau)
        tau = kendall_tau(u)
        assert 2 * tau / (1 - tau) == pytest.approx(alpha, abs=0.3)

    def test_fit_independent_data_near_floor(self, rng):
        u = pseudo_observations(rng.uniform(size=(2000, 2)))
        assert fit_clayton(u).alpha < 0.15

    def test_fit_exact_floor(self):
        # antithetic pairs have negative dependence, outside the Clayton range
        x = np.linspace(0.01, 0.99, 500)
        fit = fit_clayton(pseudo_observations(np.column_stack([x, 1 - x])))
        assert fit.at_floor and fit.alpha == ALPHA_FLOOR

    def test_pseudo_observations_strictly_inside(self, rng):
        u = pseudo_observations(rng.normal(size=(50, 3)))
        assert u.min() == 1 / 51 and u.max() == 50 / 51


class TestMarginals:
    def test_rank_count_value(self):
        grid = make_grid(np.array([[1.0], [2.0], [3.0], [4.0]]), m=2)
        ms = empirical_marginals(np.array([1.0, 2.0, 3.0, 4.0]), grid)
        # levels 1/3, 2/3 -> quantiles 2.0, 3.0; counts 2 and 3 over n + 1 = 5
        np.testing.assert_array_equal(grid.points[0], [2.0, 3.0])
        np.testing.assert_array_equal(ms.cdf_values[0], [0.4, 0.6])
        ms = empirical_marginals(np.array([1.0, 2.0, 3.0, 4.0]), Grid((np.array([2.5, 3.5]),)))
        assert ms.cdf_values[0][0] == 0.4

    def test_below_minimum_is_zero(self):
        ms = empirical_marginals(np.array([1.0, 2.0, 3.0, 4.0]), Grid((np.array([0.0, 2.5]),)))
        assert ms.cdf_values[0][0] == 0.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=60, unique=True),
           st.integers(2, 30))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, values, m):
        x = np.array(values)[:, None]
        ms = empirical_marginals(x, make_grid(x, m))
        assert np.all(np.diff(ms.cdf_values[0]) >= 0)

    def test_constant_covariate_rejected(self):
        x = np.ones((10, 1))
        with pytest.raises(DensityError, match="constant"):
            empirical_marginals(x, make_grid(np.arange(10.0)[:, None], 3))


class TestInterpolation:
    @pytest.fixture
    def summary(self):
        grid = Grid((np.array([0.1, 0.3, 0.5, 0.9]),))
        return MarginalSummary(grid, (np.array([0.2, 0.4, 0.6, 0.8]),), ((0.0, 1.0),))

    def test_knots_exact(self, summary):
        cdf, _ = interpolate_cdf(summary, 0)
        for x, v in zip(summary.grid.points[0], summary.cdf_values[0]):
            assert cdf(x) == v

    def test_midpoint(self, summary):
        cdf, _ = interpolate_cdf(summary, 0)
        assert cdf(0.4) == pytest.approx(0.5, abs=1e-15)

    def test_support_endpoints(self, summary):
        cdf, pdf = interpolate_cdf(summary, 0)
        assert cdf(0.0) == 0.0 and cdf(1.0) == 1.0
        assert pdf(-0.1) == 0.0 and pdf(1.1) == 0.0

    def test_density_telescopes_to_one(self, rng):
        x = rng.beta(2, 5, size=(500, 1))
        ms = empirical_marginals(x, make_grid(x, 100), bounds=[(0.0, 1.0)])
        pl = PiecewiseLinearCDF(ms.grid.points[0], ms.cdf_values[0], ms.support_bounds[0])
        # integrate the piecewise-constant density segment by segment
        mids = 0.5 * (pl.xp[1:] + pl.xp[:-1])
        assert np.sum(pl.pdf(mids) * np.diff(pl.xp)) == pytest.approx(1.0, abs=1e-6)

    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_interpolated_cdf_nondecreasing(self, raw):
        vals = np.sort(np.array(raw))
        pts = np.linspace(0.1, 0.9, vals.size)
        pl = PiecewiseLinearCDF(pts, vals, (0.0, 1.0))
        q = np.linspace(-0.2, 1.2, 301)
        assert np.all(np.diff(pl.cdf(q)) >= 0)
        assert np.all(pl.pdf(q) >= 0)


def _uniform_summary(prob=(0.25, 0.75), m=9, alpha=ALPHA_FLOOR):
    pts = np.arange(1, m + 1) / (m + 1)
    ms = MarginalSummary(Grid((pts, pts)), (pts, pts), ((0.0, 1.0), (0.0, 1.0)))
    return DensitySummary(
        names=("d", "a", "b"), discrete=("d",), continuous=("a", "b"),
        strata=((0.0,), (1.0,)), marginals=(ms, ms),
        copula=CopulaSummary("clayton", (alpha, alpha), prob, 1000, (True, True)),
    )


class TestReconstruction:
    def test_independent_uniform_equals_stratum_prob(self, rng):
        model = reconstruct_density(_uniform_summary())
        X = np.column_stack([rng.integers(0, 2, 500), rng.uniform(0.01, 0.99, (500, 2))])
        expected = np.where(X[:, 0] == 1, 0.75, 0.25)
        np.testing.assert_allclose(model.pdf(X), expected, rtol=1e-4)

    def test_against_setting1_truth(self):
        setting = sim.make_setting(1)
        X = sim.draw_covariates(setting.sites[0], 2000, np.random.default_rng(3))
        model = reconstruct_density(summarize_density(X, sim.COVARIATES,
                                                      sim.default_grid_config()))
        g = (np.arange(20) + 0.5) / 20
        A, B = np.meshgrid(g, g)
        Q = np.vstack([np.column_stack([np.full(400, lvl), A.ravel(), B.ravel()])
                       for lvl in (0, 1)])
        err = np.abs(model.pdf(Q) - sim.TrueDensity(setting.sites[0]).pdf(Q))
        assert err.mean() < 0.15

    def test_nonnegative(self, rng):
        X = sim.draw_covariates(sim.make_setting(4).sites[2], 500, rng)
        model = reconstruct_density(summarize_density(X, sim.COVARIATES,
                                                      sim.default_grid_config()))
        Q = np.column_stack([rng.integers(0, 2, 10_000), rng.uniform(-0.1, 1.1, (10_000, 2))])
        assert np.all(model.pdf(Q) >= 0)

    def test_unmatched_stratum_gets_floor(self):
        model = reconstruct_density(_uniform_summary())
        dens, n_unmatched = model.pdf(np.array([[2.0, 0.5, 0.5]]), return_unmatched=True)
        assert n_unmatched == 1 and dens[0] == model.density_floor

    def test_lossless_at_knots_after_transport(self, setting1_replicate):
        setting, data, _ = setting1_replicate
        study, ref = data[1]
        payload = site_export(study, ref, sim.reduced_specs(setting)[1], "site2",
                              sim.default_grid_config())
        local = reconstruct_density(payload.density)
        remote = reconstruct_density(decode_payload(encode_payload(payload)).density)
        ms = payload.density.marginals[1]
        knots = np.column_stack([np.ones(len(ms.grid.points[0][:50])),
                                 ms.grid.points[0][:50], ms.grid.points[1][:50]])
        np.testing.assert_allclose(remote.pdf(knots), local.pdf(knots), rtol=1e-12, atol=0)

    def test_stratum_too_small(self, rng):
        X = np.column_stack([np.r_[np.zeros(100), np.ones(5)], rng.uniform(size=(105, 2))])
        with pytest.raises(DensityError, match="fewer than"):
            summarize_density(X, ("d", "a", "b"), GridConfig(discrete=("d",)))

    def test_communication_cost_is_sum_of_grid_sizes(self, rng):
        X = sim.draw_covariates(sim.make_setting(1).sites[0], 500, rng)
        summary = summarize_density(X, sim.COVARIATES, sim.default_grid_config(m=100))
        # 2 strata x 2 continuous covariates x 100 points, not 100^2 per stratum
        assert summary.n_values == 2 * (2 * 100)


class TestSynthetic:
    def test_stratum_frequencies(self):
        model = reconstruct_density(_uniform_summary(prob=(0.3, 0.7)))
        X = sample_synthetic(model, 100_000, seed=5)
        assert np.mean(X[:, 0] == 1) == pytest.approx(0.7, abs=0.01)

    def test_kendall_tau(self):
        model = reconstruct_density(_uniform_summary(m=99, alpha=2.0))
        X = sample_synthetic(model, 100_000, seed=6)
        assert kendall_tau(X[:, 1:]) == pytest.approx(0.5, abs=0.03)

    def test_deterministic(self):
        model = reconstruct_density(_uniform_summary(alpha=1.0))
        np.testing.assert_array_equal(sample_synthetic(model, 1000, 9),
                                      sample_synthetic(model, 1000, 9))


class _Stub:
    names = ("d", "a", "b")

    def __init__(self, value):
        self.value = value

    def pdf(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.value)


class TestDensityRatio:
    def test_self_ratio_is_one(self, rng):
        model = reconstruct_density(summarize_density(
            sim.draw_covariates(sim.make_setting(3).sites[1], 500, rng), sim.COVARIATES,
            sim.default_grid_config()))
        Q = np.column_stack([rng.integers(0, 2, 1000), rng.uniform(size=(1000, 2))])
        r, capped = tilt_ratios(Q, model, model)
        assert np.array_equal(r, np.ones(1000)) and capped == 0
        assert density_ratio(Q[0], model, model) == 1.0

    def test_homogeneous_mean_ratio_near_one(self, setting1_replicate):
        _, data, _ = setting1_replicate
        cfg = sim.default_grid_config()
        lead_ref = data[0][1].to_numpy()
        lead = reconstruct_density(summarize_density(lead_ref, sim.COVARIATES, cfg))
        for j in (1, 2):
            other = reconstruct_density(summarize_density(data[j][1].to_numpy(),
                                                          sim.COVARIATES, cfg))
            r, _ = tilt_ratios(lead_ref, other, lead)
            assert r.mean() == pytest.approx(1.0, abs=0.2)

    def test_cap_and_counter(self):
        X = np.zeros((7, 3))
        r, capped = tilt_ratios(X, _Stub(1.0), _Stub(0.0))
        assert np.all(r == RATIO_CAP) and capped == 7
