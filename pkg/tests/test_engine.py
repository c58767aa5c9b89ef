import math

import numpy as np
import pytest

from ruinmix import engine
from ruinmix import sampler as smp


def _replay_log_weight(model, params, b, path):
    total = 0.0
    for s, s_next in zip(path[:-1], path[1:]):
        plan = smp.plan_for_state(model, params, b, s)
        total += smp.weight(plan, model, s_next - s)
    return total


@pytest.mark.parametrize("which,b", [("mg1", 200.0), ("weibull", 60.0)])
def test_likelihood_ratio_replays(which, b, request):
    m = request.getfixturevalue(which)
    p = request.getfixturevalue(f"{which}_params")
    for i in range(3):
        r = engine.run_replication(m, p, b, engine.stream(99, i), record_path=True)
        assert r.hit and r.path[-1] > b and np.all(r.path[:-1] <= b)
        assert r.path.size == r.tau + 1
        assert r.log_estimate == pytest.approx(_replay_log_weight(m, p, b, r.path), abs=1e-9)


def test_table1_override_replays(mg1, mg1_override_params):
    r = engine.run_replication(mg1, mg1_override_params, 300.0, engine.stream(5, 0),
                               record_path=True)
    assert r.log_estimate == pytest.approx(
        _replay_log_weight(mg1, mg1_override_params, 300.0, r.path), abs=1e-9)


def test_single_step_on_nominal_state(mg1, mg1_params):
    # below the nominal threshold every step has weight one
    for i in range(200):
        r = engine.run_replication(mg1, mg1_params, 1e-9, engine.stream(1, i))
        if r.tau == 1:
            assert r.hit and r.log_estimate == 0.0
            return
    pytest.fail("no single-step path found")


def test_barrier_must_be_positive(mg1, mg1_params):
    with pytest.raises(ValueError):
        engine.run_replication(mg1, mg1_params, 0.0, engine.stream(0, 0))


def test_estimate_needs_two(mg1, mg1_params):
    with pytest.raises(ValueError):
        engine.estimate(mg1, mg1_params, 10.0, 1, seed=0)


def test_shard_bounds_cover():
    assert engine.shard_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]
    assert engine.shard_bounds(2, 8) == [(0, 1), (1, 2)]


@pytest.mark.parametrize("shards", [2, 5])
def test_shards_do_not_change_results(mg1, mg1_params, shards):
    one = engine.estimate(mg1, mg1_params, 100.0, 60, seed=7, shards=1)
    many = engine.estimate(mg1, mg1_params, 100.0, 60, seed=7, shards=shards)
    for f in ("mean", "std_error", "cv", "mean_tau", "censored_frac", "log_mean"):
        assert getattr(one, f) == getattr(many, f)


def test_shards_in_worker_processes(weibull, weibull_params):
    a = engine.simulate(weibull, weibull_params, 40.0, 30, seed=3, shards=1)
    b = engine.simulate(weibull, weibull_params, 40.0, 30, seed=3, shards=3, workers=2)
    assert np.array_equal(a.log_z, b.log_z) and np.array_equal(a.tau, b.tau)


def test_censoring_is_reported(mg1, mg1_params):
    s = engine.estimate(mg1, mg1_params, 1e4, 20, seed=1, max_steps=10)
    assert s.censored_frac == 1.0
    assert s.mean == 0.0


def test_log_moments_survive_underflow():
    log_z = np.log(np.array([1.0, 2.0, 3.0])) - 800.0
    lmean, sd, n = engine.log_moments(log_z)
    assert lmean == pytest.approx(math.log(2.0) - 800.0, rel=1e-15)
    assert sd == pytest.approx(math.exp(-800.0), rel=1e-12)
    assert n == 3


def test_log_moments_all_zero():
    assert engine.log_moments(np.full(4, -np.inf)) == (-math.inf, 0.0, 4)


def test_gamma_moment_constant():
    assert engine.gamma_moment_summary(np.full(10, -3.0), 0.3) == pytest.approx(1.0)


def test_gamma_moment_second_moment_identity():
    z = np.array([0.5, 1.0, 2.5, 4.0])
    g = engine.gamma_moment_summary(np.log(z), 1.0)
    assert g == pytest.approx(1 + z.var() / z.mean() ** 2, rel=1e-14)


def test_crude_rejects_close_barrier(mg1):
    with pytest.raises(ValueError):
        engine.crude_mc(mg1, 10.0, 100, barrier=5.0)


def test_crude_barrier_rule(mg1):
    B = engine.crude_barrier(mg1, 10.0, 0.01)
    ratio = math.exp(mg1.log_integrated_tail(10.0 + B) - mg1.log_integrated_tail(10.0))
    assert ratio == pytest.approx(0.01, rel=1e-8)


def test_crude_far_barrier_has_no_hits(weibull):
    s = engine.crude_mc(weibull, 400.0, 50, seed=0)
    assert s.mean == 0.0 and s.std_error == 0.0 and s.meta["low_hit"]


def test_crude_replays(mg1):
    a = engine.crude_mc(mg1, 5.0, 200, seed=4)
    b = engine.crude_mc(mg1, 5.0, 200, seed=4, shards=3)
    assert a.mean == b.mean and a.mean_tau == b.mean_tau


def test_ak_empty_sum_branch(mg1):
    b = 100.0
    for i in range(100):
        lz, k = engine.ak_draw(2.5, 0.5, b, engine.stream(0, i))
        if k == 1:
            assert lz == pytest.approx(-1.5 * math.log1p(b), rel=1e-15)
            return
    pytest.fail("no K = 1 draw")


def test_ak_requires_mg1(weibull):
    with pytest.raises(TypeError):
        engine.ak_estimate(weibull, 10.0, 10)


def test_ak_matches_is_at_1000(mg1, mg1_override_params):
    ak = engine.ak_estimate(mg1, 1e3, 20000, seed=2)
    is_ = engine.estimate(mg1, mg1_override_params, 1e3, 4000, seed=2)
    assert abs(ak.mean - is_.mean) <= 3 * math.hypot(ak.std_error, is_.std_error)
