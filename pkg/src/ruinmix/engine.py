"""Replication kernels, estimators and their aggregation.

Every replication ``i`` draws from its own stream
``PCG64(SeedSequence(seed, spawn_key=(i,)))``.  Shards are contiguous index
ranges and results are concatenated in index order before any statistic is
formed, so output depends only on ``(seed, n, params)``, never on the shard
count or on which process ran a shard.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numba as nb
import numpy as np
from scipy import optimize

from . import sampler as smp
from .hazard import (
    MG1Pareto,
    IncrementModel,
    inverse_cumulative_hazard,
    log_sf,
    log_sf_and_integrated_tail,
    sample_interval,
    sample_nominal,
)

MAX_STEPS = 10_000_000

HIT, MISS, CENSORED, ERR_INCONSISTENT, ERR_DEGENERATE, PATH_OVERFLOW, NEG_RESIDUAL = range(7)

_STATUS_ERRORS = {
    ERR_INCONSISTENT: "mixture cutoffs out of order",
    ERR_DEGENERATE: "degenerate mixture component",
    NEG_RESIDUAL: "negative residual density in the coupling",
}


def stream(seed: int, index: int) -> np.random.Generator:
    """The random stream of replication ``index``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _two_component_step(kind, par, tab, P, rk, rv, d, rng):
    """One step of the k = 0 mixture.  Returns ``(x, log_weight, status)``.

    Equivalent to ``build_plan`` + ``draw_increment`` for two components but
    folds the regular-component weight ``P(X <= c_0) / p_*`` into one log1p.
    """
    lsf, lG = log_sf_and_integrated_tail(kind, par, tab, d)
    if P[smp.P_LOG_KAPPA] + (1.0 + P[smp.P_GAMMA]) * lG >= 0.0:
        return sample_nominal(kind, par, tab, rng), 0.0, smp.PLAN_NOMINAL
    if rk.size == 1:
        c0 = smp._rule(rk[0], rv[0], d)
    else:
        lam = -lsf
        if lam < P[smp.P_A_SS]:
            return np.nan, 0.0, smp.PLAN_INCONSISTENT
        c0 = inverse_cumulative_hazard(kind, par, tab, lam - P[smp.P_A_SS])
    lsf0 = log_sf(kind, par, tab, c0)
    lpss = P[smp.P_LOG_THETA_1G] + lsf - lG
    if lpss > P[smp.P_LOG_EPS]:
        lpss = P[smp.P_LOG_EPS]
    pss = math.exp(lpss)
    if rng.random() < 1.0 - pss:
        if c0 > 0.0:
            while True:
                x = sample_nominal(kind, par, tab, rng)
                if x <= c0:
                    break
        else:
            x, st = sample_interval(kind, par, tab, -np.inf, c0, rng)
            if st != 0:
                return np.nan, 0.0, smp.PLAN_DEGENERATE
        # log P(X <= c0) - log(1 - pss) = log1p((pss - P(X > c0)) / (1 - pss))
        return x, math.log1p((pss - math.exp(lsf0)) / (1.0 - pss)), smp.PLAN_IS
    x, st = sample_interval(kind, par, tab, c0, np.inf, rng)
    if st != 0:
        return np.nan, 0.0, smp.PLAN_DEGENERATE
    return x, lsf0 - lpss, smp.PLAN_IS


@nb.njit(cache=True)
def is_path(kind, par, tab, P, agrid, rk, rv, b, rng, max_steps, c, prob, logp, logm, path):
    """Run one IS path.  Returns ``(status, log_L, tau, S_tau, S_mid)``.

    ``path`` (possibly empty) receives ``S_0, S_1, ...`` while it has room;
    ``S_mid = S_{tau // 2}`` needs only the first half of the path.
    """
    s = 0.0
    log_l = 0.0
    n = 0
    cap = path.size
    if cap > 0:
        path[0] = 0.0
    two = rk.size == 1 or (rk.size == 0 and P[smp.P_REG_VAR] != 0.0)
    while n < max_steps:
        if two:
            x, lw, st = _two_component_step(kind, par, tab, P, rk, rv, b - s, rng)
            if st == smp.PLAN_INCONSISTENT:
                return ERR_INCONSISTENT, log_l, n, s, np.nan
            if st == smp.PLAN_DEGENERATE:
                return ERR_DEGENERATE, log_l, n, s, np.nan
            log_l += lw
        else:
            st, k = smp.build_plan(kind, par, tab, P, agrid, rk, rv, b - s, c, prob, logp, logm)
            if st == smp.PLAN_NOMINAL:
                x = sample_nominal(kind, par, tab, rng)
            elif st == smp.PLAN_IS:
                x, lw, st2 = smp.draw_increment(kind, par, tab, b - s, k, c, prob, logp, logm, rng)
                if st2 != 0:
                    return ERR_DEGENERATE, log_l, n, s, np.nan
                log_l += lw
            elif st == smp.PLAN_INCONSISTENT:
                return ERR_INCONSISTENT, log_l, n, s, np.nan
            else:
                return ERR_DEGENERATE, log_l, n, s, np.nan
        s += x
        n += 1
        if n < cap:
            path[n] = s
        if s > b:
            half = n // 2
            if cap > 0:
                if half >= cap:
                    return PATH_OVERFLOW, log_l, n, s, np.nan
                return HIT, log_l, n, s, path[half]
            return HIT, log_l, n, s, np.nan
    return CENSORED, log_l, n, s, np.nan


@nb.njit(cache=True)
def crude_path(kind, par, tab, b, barrier, rng, max_steps):
    s = 0.0
    n = 0
    while n < max_steps:
        s += sample_nominal(kind, par, tab, rng)
        n += 1
        if s > b:
            return HIT, n
        if s < -barrier:
            return MISS, n
    return CENSORED, n


@nb.njit(cache=True)
def ak_draw(iota, rho, b, rng):
    """One conditional Monte Carlo draw of P(Y_1 + ... + Y_K > b).  Returns (log Z, K)."""
    u = rng.random()
    kk = int(math.floor(math.log1p(-u) / math.log(rho)))
    if kk == 0:
        return -np.inf, 0
    s = 0.0
    m = 0.0
    a = 1.0 / (iota - 1.0)
    for _ in range(kk - 1):
        y = (1.0 - rng.random()) ** (-a) - 1.0
        s += y
        if y > m:
            m = y
    t = max(m, b - s)
    return math.log(kk) - (iota - 1.0) * math.log1p(t), kk


@nb.njit(cache=True)
def coupled_path(kind, par, tab, P, agrid, rk, rv, b, rng, max_steps, c, prob, logp, logm):
    """Jointly evolve the IS walk and a nominal walk sharing increments.

    Returns ``(status, N_b, tau)``; ``N_b = -1`` if the walks never decoupled.
    """
    s = 0.0
    n = 0
    n_b = -1
    while n < max_steps:
        d = b - s
        st, k = smp.build_plan(kind, par, tab, P, agrid, rk, rv, d, c, prob, logp, logm)
        if st == smp.PLAN_NOMINAL:
            x = sample_nominal(kind, par, tab, rng)
        elif st != smp.PLAN_IS:
            return ERR_INCONSISTENT if st == smp.PLAN_INCONSISTENT else ERR_DEGENERATE, n_b, n
        elif n_b >= 0:
            x, lw, st2 = smp.draw_increment(kind, par, tab, d, k, c, prob, logp, logm, rng)
            if st2 != 0:
                return ERR_DEGENERATE, n_b, n
        else:
            # q = p f + (1 - p) q*, with p = p_* / P(X <= c_0)
            logp_f = logp[0] - logm[0]
            p = math.exp(logp_f)
            for j in range(1, k + 2):
                if j == k and k >= 1:
                    continue
                if logp[j] - logm[j] < logp_f:
                    return NEG_RESIDUAL, n_b, n
            if rng.random() < p:
                x = sample_nominal(kind, par, tab, rng)
            else:
                while True:
                    x, lw, st2 = smp.draw_increment(kind, par, tab, d, k, c, prob, logp, logm, rng)
                    if st2 != 0:
                        return ERR_DEGENERATE, n_b, n
                    acc = 1.0 - math.exp(logp_f + lw)
                    if acc < -1e-12:
                        return NEG_RESIDUAL, n_b, n
                    if rng.random() < acc:
                        break
                sample_nominal(kind, par, tab, rng)  # the independent nominal increment
                n_b = n + 1
        s += x
        n += 1
        if s > b:
            return HIT, n_b, n
    return CENSORED, n_b, n


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class ReplicationResult:
    hit: bool
    log_estimate: float
    tau: int
    censored: bool = False
    path: np.ndarray | None = None

    @property
    def estimate(self) -> float:
        return math.exp(self.log_estimate)


@dataclass
class EstimateSummary:
    b: float
    estimator: str
    n: int
    mean: float
    std_error: float
    cv: float
    mean_tau: float
    censored_frac: float
    seed: int
    wall_seconds: float = math.nan
    gamma_moment: float | None = None
    log_mean: float = math.nan
    hits: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Batch:
    """Per-replication outputs in index order."""

    log_z: np.ndarray
    tau: np.ndarray
    status: np.ndarray
    s_tau: np.ndarray
    s_mid: np.ndarray

    @staticmethod
    def concat(parts: Sequence["Batch"]) -> "Batch":
        return Batch(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("log_z", "tau", "status", "s_tau", "s_mid")))


def _check_status(status: np.ndarray, start: int = 0):
    for code, msg in _STATUS_ERRORS.items():
        idx = np.flatnonzero(status == code)
        if idx.size:
            err = smp.PlanInconsistencyError if code == ERR_INCONSISTENT else ValueError
            raise err(f"{msg} in replication {start + int(idx[0])} ({idx.size} affected)")


# ---------------------------------------------------------------------------
# block runners (module level so they pickle into worker processes)
# ---------------------------------------------------------------------------


def _is_block(model, params, b, seed, start, stop, record, max_steps):
    P, agrid, rk, rv = params.packed()
    c, prob, logp, logm = smp.new_buffers(max(smp.K_MAX, agrid.size + 2, rk.size + 1))
    n = stop - start
    out = Batch(np.empty(n), np.empty(n, np.int64), np.empty(n, np.int64), np.empty(n), np.empty(n))
    path = np.empty(1 << 16 if record else 0)
    kern = model.kernel
    for i in range(n):
        while True:
            rng = stream(seed, start + i)
            st, log_l, tau, s_tau, s_mid = is_path(*kern, P, agrid, rk, rv, float(b), rng,
                                                   max_steps, c, prob, logp, logm, path)
            if st != PATH_OVERFLOW:
                break
            path = np.empty(2 * path.size)
        out.log_z[i] = log_l if st == HIT else -np.inf
        out.tau[i] = tau
        out.status[i] = st
        out.s_tau[i] = s_tau
        out.s_mid[i] = s_mid
    return out


def _crude_block(model, b, barrier, seed, start, stop, max_steps):
    n = stop - start
    out = Batch(np.empty(n), np.empty(n, np.int64), np.empty(n, np.int64), np.full(n, np.nan),
                np.full(n, np.nan))
    kern = model.kernel
    for i in range(n):
        st, steps = crude_path(*kern, float(b), float(barrier), stream(seed, start + i), max_steps)
        out.log_z[i] = 0.0 if st == HIT else -np.inf
        out.tau[i] = steps
        out.status[i] = st
    return out


def _ak_block(iota, rho, b, seed, start, stop):
    n = stop - start
    out = Batch(np.empty(n), np.empty(n, np.int64), np.empty(n, np.int64), np.full(n, np.nan),
                np.full(n, np.nan))
    for i in range(n):
        lz, kk = ak_draw(iota, rho, float(b), stream(seed, start + i))
        out.log_z[i] = lz
        out.tau[i] = kk
        out.status[i] = HIT if lz > -np.inf else MISS
    return out


def shard_bounds(n: int, shards: int) -> list[tuple[int, int]]:
    shards = max(1, min(int(shards), n))
    edges = [n * j // shards for j in range(shards + 1)]
    return list(zip(edges[:-1], edges[1:]))


def _fan_out(fn, args_for, n: int, shards: int, workers: int | None, concat=Batch.concat):
    bounds = shard_bounds(n, shards)
    if workers is None:
        workers = min(len(bounds), os.cpu_count() or 1)
    if workers <= 1 or len(bounds) == 1:
        parts = [fn(*args_for(lo, hi)) for lo, hi in bounds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(fn, *args_for(lo, hi)) for lo, hi in bounds]
            parts = [f.result() for f in futs]
    return concat(parts)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def log_moments(log_z: np.ndarray):
    """(log mean, std, n) of exp(log_z), shifted by the max to avoid underflow."""
    n = log_z.size
    finite = log_z[np.isfinite(log_z)]
    if finite.size == 0:
        return -math.inf, 0.0, n
    m = float(finite.max())
    z = np.exp(log_z - m)
    mean_s = math.fsum(z) / n
    var_s = math.fsum((z - mean_s) ** 2) / (n - 1) if n > 1 else 0.0
    return m + math.log(mean_s), math.exp(m) * math.sqrt(var_s), n


def gamma_moment_summary(results, gamma: float) -> float:
    """Sample mean of Z^(1+gamma) over (sample mean of Z)^(1+gamma)."""
    if isinstance(results, Batch):
        log_z = results.log_z
    elif len(results) and isinstance(results[0], ReplicationResult):
        log_z = np.array([r.log_estimate for r in results])
    else:
        log_z = np.asarray(results, dtype=float)
    finite = log_z[np.isfinite(log_z)]
    if finite.size == 0:
        return math.nan
    m = float(finite.max())
    z = np.exp(log_z - m)
    n = log_z.size
    return (math.fsum(z ** (1.0 + gamma)) / n) / (math.fsum(z) / n) ** (1.0 + gamma)


def summarize(batch: Batch, b: float, estimator: str, seed: int, wall: float = math.nan,
              gamma: float | None = None, meta: dict | None = None) -> EstimateSummary:
    lmean, sd, n = log_moments(batch.log_z)
    mean = math.exp(lmean)
    cv = sd / mean if mean > 0 else math.nan
    return EstimateSummary(
        b=float(b), estimator=estimator, n=n, mean=mean, std_error=sd / math.sqrt(n), cv=cv,
        mean_tau=math.fsum(batch.tau.astype(float)) / n,
        censored_frac=float(np.count_nonzero(batch.status == CENSORED)) / n,
        seed=int(seed), wall_seconds=wall,
        gamma_moment=None if gamma is None else gamma_moment_summary(batch, gamma),
        log_mean=lmean, hits=int(np.count_nonzero(batch.status == HIT)), meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def run_replication(model: IncrementModel, params, b: float, rng: np.random.Generator,
                    record_path: bool = False, max_steps: int = MAX_STEPS) -> ReplicationResult:
    """One IS path from the origin to absorption above ``b``."""
    if not b > 0:
        raise ValueError("the barrier must be positive")
    P, agrid, rk, rv = params.packed()
    c, prob, logp, logm = smp.new_buffers(max(smp.K_MAX, agrid.size + 2, rk.size + 1))
    state = rng.bit_generator.state
    size = 1 << 12 if record_path else 0
    while True:
        path = np.empty(size)
        st, log_l, tau, _, _ = is_path(*model.kernel, P, agrid, rk, rv, float(b), rng, max_steps,
                                       c, prob, logp, logm, path)
        if record_path and (st == PATH_OVERFLOW or tau >= size):
            rng.bit_generator.state = state
            size = max(2 * size, 2 * tau + 2)
            continue
        break
    _check_status(np.array([st]))
    hit = st == HIT
    return ReplicationResult(hit, log_l if hit else -math.inf, int(tau), st == CENSORED,
                             path[: tau + 1].copy() if record_path else None)


def simulate(model: IncrementModel, params, b: float, n: int, seed: int, shards: int = 1,
             workers: int | None = None, record: bool = False,
             max_steps: int = MAX_STEPS) -> Batch:
    """Raw per-replication IS outputs."""
    if n < 1:
        raise ValueError("need at least one replication")
    batch = _fan_out(_is_block, lambda lo, hi: (model, params, b, seed, lo, hi, record, max_steps),
                     n, shards, workers)
    _check_status(batch.status)
    return batch


def estimate(model: IncrementModel, params, b: float, n: int, seed: int, shards: int = 1,
             workers: int | None = None, gamma: float | None = None,
             max_steps: int = MAX_STEPS) -> EstimateSummary:
    """Importance-sampling estimate of the ruin probability above ``b``."""
    if n < 2:
        raise ValueError("need n >= 2 replications")
    t0 = time.perf_counter()
    batch = simulate(model, params, b, n, seed, shards, workers, max_steps=max_steps)
    if gamma is None and params.mode.value == "gamma_moment":
        gamma = params.gamma
    return summarize(batch, b, "is", seed, time.perf_counter() - t0, gamma)


def crude_barrier(model: IncrementModel, b: float, ratio: float) -> float:
    """Smallest B with G(b + B) / G(b) <= ratio."""
    target = model.log_integrated_tail(b) + math.log(ratio)
    hi = max(1.0, b)
    while model.log_integrated_tail(b + hi) > target:
        hi *= 2.0
    return optimize.brentq(lambda x: model.log_integrated_tail(b + x) - target, 0.0, hi,
                           xtol=1e-9, rtol=1e-14)


def crude_mc(model: IncrementModel, b: float, n: int, barrier: float | None = None,
             seed: int = 0, shards: int = 1, workers: int | None = None,
             bias_target: float = 1e-3, max_steps: int = MAX_STEPS) -> EstimateSummary:
    """Nominal-walk Monte Carlo, absorbing below ``-barrier`` as a miss.

    The absorption biases the estimate down by roughly ``G(b+B)/G(b)`` in
    relative terms; the barrier must keep this at most 1%.
    """
    if n < 2:
        raise ValueError("need n >= 2 replications")
    ratio = math.exp(model.log_integrated_tail(b + (barrier or 0.0)) - model.log_integrated_tail(b))
    if barrier is None:
        barrier = crude_barrier(model, b, bias_target)
        ratio = bias_target
    elif not ratio <= 0.01:
        raise ValueError(f"barrier {barrier} too close: G(b+B)/G(b) = {ratio:.3g} > 0.01")
    t0 = time.perf_counter()
    batch = _fan_out(_crude_block, lambda lo, hi: (model, b, barrier, seed, lo, hi, max_steps),
                     n, shards, workers)
    out = summarize(batch, b, "crude", seed, time.perf_counter() - t0,
                    meta={"barrier": barrier, "relative_bias_bound": ratio})
    out.meta["low_hit"] = out.hits < 30
    return out


def ak_estimate(mg1: IncrementModel, b: float, n: int, seed: int = 0, shards: int = 1,
                workers: int | None = None) -> EstimateSummary:
    """Conditional Monte Carlo on the Pollaczek-Khinchine random sum."""
    if not isinstance(mg1, MG1Pareto):
        raise TypeError("the random-sum estimator applies to the M/G/1 Pareto model only")
    if n < 2:
        raise ValueError("need n >= 2 replications")
    t0 = time.perf_counter()
    iota, rho = mg1.service_index, mg1.traffic_intensity
    batch = _fan_out(_ak_block, lambda lo, hi: (iota, rho, b, seed, lo, hi), n, shards, workers)
    return summarize(batch, b, "ak", seed, time.perf_counter() - t0,
                     meta={"traffic_intensity": rho, "tau_column": "geometric count K"})
