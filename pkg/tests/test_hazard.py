import math

import numpy as np
import pytest
from scipy import integrate, stats

from ruinmix import hazard
from ruinmix.hazard import DegenerateIntervalError, TailClass

# Independent values from 30-digit quadrature of P(V - T > x) with
# V ~ Pareto(2.5) on (0, inf) and T ~ Exp(rate 3/4).
MG1_LOG_SF = {-2.0: -0.17305630469424944, 0.0: -1.2454341074688846,
              10.0: -6.2402568506710261, 100.0: -11.569873057302699}
MG1_G = {0.0: 0.28291208272112229, 10.0: 0.015674275135616948, 100.0: 0.0006441949768992399}
MG1_MEAN_EXCESS_1E4 = 6668.2219261331515


class TestWeibullClosedForms:
    def test_cumulative_hazard_values(self, weibull):
        assert hazard.cumulative_hazard(weibull, 0.0) == pytest.approx(2.0, abs=1e-15)
        assert hazard.cumulative_hazard(weibull, -1.0) == 0.0

    def test_inverse_cumulative_hazard(self, weibull):
        assert hazard.inverse_cumulative_hazard_of(weibull, 4.0) == pytest.approx(3.0, abs=1e-12)
        assert hazard.inverse_cumulative_hazard_of(weibull, 2.0) == pytest.approx(0.0, abs=1e-12)

    def test_integrated_tail(self, weibull):
        assert hazard.integrated_tail(weibull, -1.0) == pytest.approx(0.5, rel=1e-14)
        assert hazard.integrated_tail(weibull, 0.0) == pytest.approx(1.5 * math.exp(-2.0), rel=1e-14)
        assert 1.5 * math.exp(-2.0) == pytest.approx(0.203002, abs=1e-6)

    def test_integrated_tail_against_quadrature(self, weibull):
        for x in (-0.5, 3.0, 40.0):
            val, _ = integrate.quad(lambda t: math.exp(-2 * math.sqrt(t + 1)), x, np.inf,
                                    epsrel=1e-12)
            assert weibull.integrated_tail(x) == pytest.approx(val, rel=1e-9)

    @pytest.mark.parametrize("b", [0.0, 3.0, 250.0, 1e4])
    def test_mean_excess_scale_is_exact(self, weibull, b):
        assert hazard.mean_excess_scale(weibull, b) == pytest.approx(math.sqrt(b + 1) + 0.5, rel=1e-13)

    def test_mean_excess_scale_survives_underflow(self, weibull):
        # exp(-2 sqrt(1e6)) underflows in linear space
        assert weibull.mean_excess_scale(1e6) == pytest.approx(math.sqrt(1e6 + 1) + 0.5, rel=1e-12)

    def test_metadata(self, weibull):
        assert weibull.mean_drift == -0.5
        assert weibull.variance == 1.25
        assert weibull.tail_class is TailClass.CONCAVE_HAZARD
        assert weibull.support_min == -1.0

    def test_below_support(self, weibull):
        with pytest.raises(ValueError):
            hazard.cumulative_hazard(weibull, -1.5)
        with pytest.raises(ValueError):
            hazard.inverse_cumulative_hazard_of(weibull, -0.1)


class TestMG1AgainstQuadrature:
    @pytest.mark.parametrize("x", sorted(MG1_LOG_SF))
    def test_log_sf(self, mg1, x):
        assert float(mg1.log_sf(x)) == pytest.approx(MG1_LOG_SF[x], rel=1e-10)

    @pytest.mark.parametrize("x", sorted(MG1_G))
    def test_integrated_tail(self, mg1, x):
        assert float(mg1.integrated_tail(x)) == pytest.approx(MG1_G[x], rel=1e-9)

    def test_mean_excess_scale(self, mg1):
        a = hazard.mean_excess_scale(mg1, 1e4)
        assert a == pytest.approx(MG1_MEAN_EXCESS_1E4, rel=1e-9)
        assert a == pytest.approx(1e4 / 1.5, rel=0.05)

    def test_metadata(self, mg1):
        assert mg1.mean_drift == pytest.approx(-2.0 / 3.0, rel=1e-15)
        assert mg1.variance == pytest.approx(4.0, rel=1e-14)
        assert mg1.traffic_intensity == pytest.approx(0.5, rel=1e-15)
        assert mg1.tail_class is TailClass.REGULARLY_VARYING

    def test_integrated_tail_vanishes(self, mg1):
        xs = np.geomspace(1.0, 1e9, 40)
        g = mg1.integrated_tail(xs)
        assert np.all(np.diff(g) < 0)
        assert g[-1] < 1e-12

    def test_regular_variation_ratio(self, mg1):
        b = 1e6
        ratio = float(mg1.integrated_tail(b)) / (b * float(mg1.sf(b)))
        assert ratio == pytest.approx(1.0 / 1.5, rel=1e-3)

    def test_rejects_positive_drift(self):
        with pytest.raises(ValueError):
            hazard.MG1Pareto(service_index=2.5, interarrival_mean=0.5)


@pytest.mark.parametrize("which", ["mg1", "weibull"])
class TestSharedIdentities:
    def test_round_trip(self, which, request):
        m = request.getfixturevalue(which)
        x = np.geomspace(1e-3, 1e6, 200)
        y = m.cumulative_hazard(x)
        back = m.inverse_cumulative_hazard(y)
        assert np.max(np.abs(back - x) / np.maximum(1.0, x)) < 1e-10

    def test_dG_equals_minus_sf(self, which, request):
        m = request.getfixturevalue(which)
        for x in (0.5, 7.0, 120.0):
            h = 1e-4 * max(1.0, x)
            dg = (m.integrated_tail(x + h) - m.integrated_tail(x - h)) / (2 * h)
            assert dg == pytest.approx(-float(m.sf(x)), rel=1e-6)

    def test_sf_is_exp_minus_hazard(self, which, request):
        m = request.getfixturevalue(which)
        x = np.linspace(0.0, 500.0, 51)
        np.testing.assert_allclose(np.exp(-m.cumulative_hazard(x)), m.sf(x), rtol=1e-12)

    def test_pdf_integrates_to_one(self, which, request):
        m = request.getfixturevalue(which)
        lo = m.support_min if math.isfinite(m.support_min) else -np.inf
        pts = [0.0, 10.0, 100.0]
        total = sum(integrate.quad(lambda t: float(m.pdf(t)), a, b, limit=200, epsrel=1e-12)[0]
                    for a, b in zip([lo] + pts, pts + [np.inf]))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_replay(self, which, request):
        m = request.getfixturevalue(which)
        a = m.sample_nominal(np.random.default_rng(5), 50)
        b = m.sample_nominal(np.random.default_rng(5), 50)
        assert np.array_equal(a, b)

    def test_unbounded_interval_matches_nominal(self, which, request):
        m = request.getfixturevalue(which)
        rng = np.random.default_rng(11)
        xs = np.array([m.sample_conditional_interval(-np.inf, np.inf, rng) for _ in range(20000)])
        assert stats.kstest(xs, m.cdf).pvalue > 1e-3


@pytest.mark.parametrize("which,mean", [("weibull", -0.5), ("mg1", -2.0 / 3.0)])
def test_nominal_mean(which, mean, request):
    m = request.getfixturevalue(which)
    xs = m.sample_nominal(np.random.default_rng(2024), 10**6)
    se = xs.std(ddof=1) / math.sqrt(xs.size)
    assert abs(xs.mean() - mean) <= 3 * se


def test_weibull_conditional_mean_above_zero(weibull):
    # E[X | X > 0] = G(0) / P(X > 0) = 1.5
    rng = np.random.default_rng(8)
    xs = np.array([weibull.sample_conditional_interval(0.0, np.inf, rng) for _ in range(100000)])
    assert xs.min() > 0
    assert abs(xs.mean() - 1.5) <= 3 * xs.std(ddof=1) / math.sqrt(xs.size)


def test_degenerate_interval(weibull):
    with pytest.raises(DegenerateIntervalError):
        weibull.sample_conditional_interval(3.0, 3.0 + 1e-9, np.random.default_rng(0))


def test_empty_interval_rejected(weibull):
    with pytest.raises(ValueError):
        weibull.sample_conditional_interval(2.0, 1.0, np.random.default_rng(0))


@pytest.mark.parametrize("which,lo,hi", [("weibull", 2.0, 30.0), ("mg1", -3.0, 4.0),
                                          ("mg1", 50.0, 400.0)])
def test_conditional_sampler_chi_square(which, lo, hi, request):
    m = request.getfixturevalue(which)
    rng = np.random.default_rng(17)
    xs = np.array([m.sample_conditional_interval(lo, hi, rng) for _ in range(100000)])
    assert xs.min() > lo and xs.max() <= hi
    mass = math.exp(m.log_interval_mass(lo, hi))
    q = np.linspace(0.0, 1.0, 51)
    # equiprobable bins under the conditional law
    edges = [lo] + [float(_cond_quantile(m, lo, hi, mass, u)) for u in q[1:-1]] + [hi]
    counts, _ = np.histogram(xs, bins=edges)
    assert stats.chisquare(counts).pvalue > 1e-3


def _cond_quantile(m, lo, hi, mass, u):
    from scipy import optimize
    f_lo = float(m.cdf(lo)) if math.isfinite(lo) else 0.0
    return optimize.brentq(lambda x: (float(m.cdf(x)) - f_lo) / mass - u, lo, hi, xtol=1e-12)


def test_model_from_config_round_trip(mg1, weibull):
    for m in (mg1, weibull):
        again = hazard.model_from_config(m.to_config())
        assert type(again) is type(m)
        assert again.to_config() == m.to_config()
    with pytest.raises(ValueError):
        hazard.model_from_config({"name": "lognormal"})
