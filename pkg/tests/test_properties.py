import math

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from ruinmix import engine, hazard, limits, tuning
from ruinmix import sampler as smp

MG1 = hazard.MG1Pareto()
WEIBULL = hazard.WeibullType()
MODELS = {"mg1": MG1, "weibull": WEIBULL}
PARAMS = {"mg1": tuning.select_variance_params(MG1),
          "weibull": tuning.select_variance_params(WEIBULL)}

models = st.sampled_from(sorted(MODELS))
fast = settings(max_examples=60, deadline=None,
                suppress_health_check=[HealthCheck.function_scoped_fixture])


@fast
@given(models, st.floats(0.0, 1e6))
def test_round_trip(name, x):
    m = MODELS[name]
    back = float(m.inverse_cumulative_hazard(m.cumulative_hazard(x)))
    assert abs(back - x) <= 1e-10 * max(1.0, x)


@fast
@given(models, st.floats(-0.99, 1e5), st.floats(1e-3, 1e3))
def test_hazard_monotone(name, x, h):
    m = MODELS[name]
    assert m.cumulative_hazard(x + h) >= m.cumulative_hazard(x)
    assert m.integrated_tail(x + h) < m.integrated_tail(x)


@fast
@given(st.floats(0.0, 1e5), st.floats(1e-3, 1e3))
def test_weibull_hazard_non_increasing(x, h):
    assert WEIBULL.hazard(x + h) <= WEIBULL.hazard(x) * (1 + 1e-12)


@fast
@given(models, st.floats(-0.9, 500.0), st.floats(0.1, 50.0), st.floats(0.1, 50.0))
def test_interval_mass_additive(name, a, w1, w2):
    m = MODELS[name]
    b, c = a + w1, a + w1 + w2
    whole = math.exp(m.log_interval_mass(a, c))
    parts = math.exp(m.log_interval_mass(a, b)) + math.exp(m.log_interval_mass(b, c))
    assert whole == pytest.approx(parts, rel=1e-9, abs=1e-300)


def _plan(name, d):
    p = PARAMS[name]
    assume(d > p.eta_star)
    return MODELS[name], p, smp.plan_for_state(MODELS[name], p, d, 0.0)


@fast
@given(models, st.floats(1.0, 1e7))
def test_plan_invariants(name, d):
    m, p, plan = _plan(name, d)
    assert not plan.nominal
    assert plan.probs.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all((plan.probs >= 0) & (plan.probs < 1))
    assert np.all(np.diff(plan.cutoffs) >= 0)
    lsf, lg = float(m.log_sf(d)), float(m.log_integrated_tail(d))
    expected = min(2 * p.theta * math.exp(lsf - lg), p.eps_tilde)
    assert plan.p_star_star == pytest.approx(expected, rel=1e-12)
    np.testing.assert_allclose(plan.probs[1:-1], p.eps_tilde1 * plan.p_star_star, rtol=1e-12)


@fast
@given(models, st.floats(1.0, 1e6), st.floats(-50.0, 2e6))
def test_support_partition_and_weight(name, d, x):
    m, p, plan = _plan(name, d)
    assume(float(m.log_pdf(x)) > -700)
    inside = [lo < x <= hi for lo, hi, _ in smp.component_intervals(plan)]
    assert sum(inside) == 1
    lw = smp.weight(plan, m, x)
    assert lw == pytest.approx(float(m.log_pdf(x)) - smp.log_q(plan, m, x), abs=1e-9)


@fast
@given(st.lists(st.floats(-50.0, 5.0), min_size=2, max_size=50), st.floats(-300.0, 300.0))
def test_log_moments_shift(log_z, c):
    a = engine.log_moments(np.array(log_z))
    b = engine.log_moments(np.array(log_z) + c)
    assert b[0] == pytest.approx(a[0] + c, rel=1e-12, abs=1e-9)


@fast
@given(st.lists(st.floats(-30.0, 5.0), min_size=2, max_size=50), st.floats(0.01, 2.0),
       st.floats(-200.0, 200.0))
def test_gamma_moment_at_least_one_and_scale_free(log_z, gamma, c):
    z = np.array(log_z)
    g = engine.gamma_moment_summary(z, gamma)
    assert g >= 1 - 1e-12
    assert engine.gamma_moment_summary(z + c, gamma) == pytest.approx(g, rel=1e-9)


@fast
@given(st.integers(1, 10**6), st.integers(1, 64))
def test_shard_bounds_partition(n, shards):
    b = engine.shard_bounds(n, shards)
    assert b[0][0] == 0 and b[-1][1] == n
    assert all(hi > lo for lo, hi in b)
    assert all(x[1] == y[0] for x, y in zip(b[:-1], b[1:]))


@fast
@given(st.lists(st.floats(0.0, 100.0), min_size=5, max_size=80), st.floats(-50.0, 50.0),
       st.integers(0, 2**32 - 1))
def test_weighted_ks_invariances(xs, c, seed):
    x = np.array(xs)
    lw = np.random.default_rng(seed).normal(size=x.size)
    cdf = limits.LimitLaw.pareto(2.5).cdf
    a = limits.weighted_ks(x, limits.normalized_weights(lw), cdf)
    b = limits.weighted_ks(x, limits.normalized_weights(lw + c), cdf)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(b, abs=1e-12)


@fast
@given(st.floats(0.0, 10.0), st.floats(1e-6, 10.0))
def test_tv_bound_range(m2, u2):
    v = limits.tv_upper_bound(m2, u2)
    assert 0.0 <= v <= 1.0


@fast
@given(st.sampled_from(["pareto", "exponential"]), st.floats(1.05, 5.0), st.floats(0.1, 3.0),
       st.floats(0.01, 100.0), st.floats(0.0, 1e3), st.floats(0.0, 1e3))
def test_limit_law_monotone(kind, iota, power, scale, t, h):
    law = limits.LimitLaw(kind, iota if kind == "pareto" else math.nan, power, scale)
    assert law.survival(0.0) == 1.0
    assert law.survival(t + h) <= law.survival(t)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 0.24))
def test_step_identities(delta0):
    p = tuning.select_variance_params(WEIBULL, user_overrides={"delta0": delta0,
                                                               "lyapunov_probe": False})
    assert p.theta == pytest.approx(0.5 * (1 - delta0) / (1 + delta0) ** 5, rel=1e-14)
    assert p.eps_tilde == pytest.approx(delta0**2, rel=1e-14)
    assert p.eps_tilde1 == pytest.approx(delta0 / (p.k + 1), rel=1e-14)
    assert p.kappa >= math.exp(2 * p.a_star_star) / (4 * p.theta**2 * delta0) * (1 - 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.95))
def test_cutoff_grid_separation(beta0):
    try:
        sigma1, a, k, sigma2 = tuning.build_cutoff_grid(beta0)
    except tuning.TuningError:
        return
    for j in range(len(a) - 1):
        assert a[j] ** beta0 + (1 - a[j + 1]) ** beta0 >= 1 + sigma2 - 1e-12
    assert sigma2 > 0


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(2, 6))
def test_determinism_across_shards(seed, shards):
    p = PARAMS["weibull"]
    a = engine.simulate(WEIBULL, p, 25.0, 12, seed, shards=1)
    b = engine.simulate(WEIBULL, p, 25.0, 12, seed, shards=shards)
    assert np.array_equal(a.log_z, b.log_z) and np.array_equal(a.tau, b.tau)
