"""Per-state mixture change of measure.

At distance ``d = b - s`` from the barrier the proposal density is a mixture
whose components live on disjoint intervals cut at ``c_0 < c_1 < ... < c_k``:

* ``(-inf, c_0]``       f restricted ("regular" moves), probability ``p_*``
* ``(c_{j-1}, c_j]``    f restricted, ``j < k``, probability ``p_j``
* ``(c_{k-1}, c_k]``    reflected: ``x = d - Y`` with ``Y ~ f`` on ``(d - c_k, d - c_{k-1}]``
* ``(c_k, inf)``        f restricted ("big jump"), probability ``p_**``

All probabilities and masses are kept in log space.  The numba kernels here
are shared by the simulation engine; the Python functions wrap them for
single-state use and testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .hazard import (
    DEGENERATE,
    DegenerateIntervalError,
    IncrementModel,
    _LOG_REL_MASS_FLOOR,
    inverse_cumulative_hazard,
    log_cdf,
    log_cdf_given_sf,
    log_interval_mass,
    log_pdf,
    log_sf,
    log_sf_and_integrated_tail,
    sample_interval,
    sample_nominal,
)

# slots of the packed parameter vector
(P_A_STAR, P_A_SS, P_THETA, P_EPS, P_EPS1, P_LOG_KAPPA, P_GAMMA, P_REG_VAR,
 P_LOG_THETA_1G, P_LOG_EPS, P_LOG_EPS1) = range(11)
N_PACKED = 11

# cutoff rule kinds: c = v*d, c = v*sqrt(d), c = d - v*sqrt(d)
RULE_FRAC, RULE_SQRT, RULE_MINUS_SQRT = 0, 1, 2
RULE_NAMES = {"frac": RULE_FRAC, "sqrt": RULE_SQRT, "minus_sqrt": RULE_MINUS_SQRT}

PLAN_IS, PLAN_NOMINAL, PLAN_INCONSISTENT, PLAN_DEGENERATE = 0, 1, 2, 3

K_MAX = 64


class PlanInconsistencyError(ValueError):
    """Cutoffs came out unordered; the nominal threshold is too small for this distance."""


@nb.njit(cache=True, inline='always')
def _rule(kind, v, d):
    if kind == RULE_FRAC:
        return v * d
    if kind == RULE_SQRT:
        return v * math.sqrt(d)
    return d - v * math.sqrt(d)


@nb.njit(cache=True)
def build_plan(kind, par, tab, P, agrid, rk, rv, d, c, prob, logp, logm):
    """Fill cutoffs and component probabilities for distance ``d``.

    Returns ``(status, k)``.  Buffers are indexed ``[*, 1..k, **]`` for
    probabilities and masses, and ``[0..k]`` for cutoffs.
    """
    lsf, lG = log_sf_and_integrated_tail(kind, par, tab, d)
    if P[P_LOG_KAPPA] + (1.0 + P[P_GAMMA]) * lG >= 0.0:
        return PLAN_NOMINAL, 0
    nr = rk.size
    if nr > 0:
        k = nr - 1
        for i in range(nr):
            c[i] = _rule(rk[i], rv[i], d)
    else:
        lam = -lsf
        if lam < P[P_A_SS] or lam < P[P_A_STAR]:
            return PLAN_INCONSISTENT, 0
        ck = inverse_cumulative_hazard(kind, par, tab, lam - P[P_A_SS])
        if P[P_REG_VAR] != 0.0:
            k = 0
            c[0] = ck
        else:
            m = agrid.size
            k = m + 1
            c[0] = d - inverse_cumulative_hazard(kind, par, tab, lam - P[P_A_STAR])
            for j in range(m):
                c[j + 1] = agrid[j] * d
            c[k] = ck
    for i in range(1, k + 1):
        if not c[i] > c[i - 1]:
            return PLAN_INCONSISTENT, k

    lpss = P[P_LOG_THETA_1G] + lsf - lG
    if lpss > P[P_LOG_EPS]:
        lpss = P[P_LOG_EPS]
    pss = math.exp(lpss)
    pj = P[P_EPS1] * pss
    prob[k + 1] = pss
    logp[k + 1] = lpss
    for j in range(1, k + 1):
        prob[j] = pj
        logp[j] = P[P_LOG_EPS1] + lpss
    prob[0] = 1.0 - pss * (1.0 + k * P[P_EPS1])
    logp[0] = math.log1p(-pss * (1.0 + k * P[P_EPS1]))

    lsf0 = log_sf(kind, par, tab, c[0])
    logm[0] = log_cdf_given_sf(kind, par, tab, c[0], lsf0)
    logm[k + 1] = lsf0 if k == 0 else log_sf(kind, par, tab, c[k])
    for j in range(1, k + 1):
        if j < k:
            lo = c[j - 1]
            hi = c[j]
        else:
            lo = d - c[k]
            hi = d - c[k - 1]
        lm = log_interval_mass(kind, par, tab, lo, hi)
        logm[j] = lm
        if not lm - log_sf(kind, par, tab, lo) >= _LOG_REL_MASS_FLOOR:
            return PLAN_DEGENERATE, k
    if not (logm[0] > -np.inf and logm[k + 1] > -np.inf):
        return PLAN_DEGENERATE, k
    return PLAN_IS, k


@nb.njit(cache=True, inline='always')
def component_of(x, k, c):
    """Index (in ``[*, 1..k, **]`` order) of the component whose support holds x."""
    if x <= c[0]:
        return 0
    if x > c[k]:
        return k + 1
    for j in range(1, k + 1):
        if x <= c[j]:
            return j
    return k + 1


@nb.njit(cache=True, inline='always')
def log_weight(kind, par, tab, d, k, c, logp, logm, x):
    """log f(x) - log q(x) for an IS plan."""
    j = component_of(x, k, c)
    if j == k and k >= 1:
        return log_pdf(kind, par, tab, x) - (logp[k] + log_pdf(kind, par, tab, d - x) - logm[k])
    return logm[j] - logp[j]


@nb.njit(cache=True)
def log_density(kind, par, tab, d, k, c, logp, logm, x):
    """log q(x) for an IS plan (``-inf`` off the support of f)."""
    j = component_of(x, k, c)
    if j == k and k >= 1:
        return logp[k] + log_pdf(kind, par, tab, d - x) - logm[k]
    return logp[j] + log_pdf(kind, par, tab, x) - logm[j]


@nb.njit(cache=True, inline='always')
def draw_component(kind, par, tab, d, k, c, j, rng):
    """Draw x from component j.  Returns ``(x, status)``."""
    if j == 0:
        if c[0] > 0.0:
            # f_* carries almost all of f; plain rejection is cheapest
            while True:
                x = sample_nominal(kind, par, tab, rng)
                if x <= c[0]:
                    return x, 0
        return sample_interval(kind, par, tab, -np.inf, c[0], rng)
    if j == k + 1:
        return sample_interval(kind, par, tab, c[k], np.inf, rng)
    if j < k:
        return sample_interval(kind, par, tab, c[j - 1], c[j], rng)
    y, st = sample_interval(kind, par, tab, d - c[k], d - c[k - 1], rng)
    return d - y, st


@nb.njit(cache=True)
def draw_increment(kind, par, tab, d, k, c, prob, logp, logm, rng):
    """One increment under the IS plan.  Returns ``(x, log_weight, status)``."""
    u = rng.random()
    j = k + 1
    acc = 0.0
    for i in range(k + 1):
        acc += prob[i]
        if u < acc:
            j = i
            break
    x, st = draw_component(kind, par, tab, d, k, c, j, rng)
    if st != 0:
        return x, 0.0, st
    return x, log_weight(kind, par, tab, d, k, c, logp, logm, x), 0


# ---------------------------------------------------------------------------
# Python-facing plan object
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixturePlan:
    """Change of measure at one state; ``nominal`` plans leave f untouched."""

    b_minus_s: float
    nominal: bool
    k: int
    cutoffs: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray
    log_masses: np.ndarray

    @property
    def p_star(self) -> float:
        return float(self.probs[0]) if not self.nominal else 1.0

    @property
    def p_star_star(self) -> float:
        return float(self.probs[self.k + 1]) if not self.nominal else 0.0

    def buffers(self):
        return self.b_minus_s, self.k, self.cutoffs, self.probs, self.log_probs, self.log_masses


def new_buffers(k_max: int = K_MAX):
    return (np.empty(k_max + 1), np.empty(k_max + 2), np.empty(k_max + 2), np.empty(k_max + 2))


def plan_for_state(model: IncrementModel, params, b: float, s: float) -> MixturePlan:
    """Mixture plan at position ``s`` for barrier ``b``."""
    if not s < b:
        raise ValueError("state must lie below the barrier")
    d = float(b - s)
    P, agrid, rk, rv = params.packed()
    c, prob, logp, logm = new_buffers(max(K_MAX, agrid.size + 2, rk.size + 1))
    status, k = build_plan(*model.kernel, P, agrid, rk, rv, d, c, prob, logp, logm)
    if status == PLAN_NOMINAL:
        empty = np.empty(0)
        return MixturePlan(d, True, 0, empty, np.ones(1), np.zeros(1), np.zeros(1))
    if status == PLAN_INCONSISTENT:
        raise PlanInconsistencyError(
            f"cutoffs not increasing at distance {d:g}: {c[:k + 1]}; raise the nominal threshold"
        )
    if status == PLAN_DEGENERATE:
        raise DegenerateIntervalError(f"a mixture component has unresolvable mass at distance {d:g}")
    return MixturePlan(d, False, k, c[:k + 1].copy(), prob[:k + 2].copy(),
                       logp[:k + 2].copy(), logm[:k + 2].copy())


def sample_increment(plan: MixturePlan, model: IncrementModel, rng: np.random.Generator):
    """Draw ``(x, log_weight)`` under the plan."""
    if plan.nominal:
        return sample_nominal(*model.kernel, rng), 0.0
    x, lw, st = draw_increment(*model.kernel, *plan.buffers(), rng)
    if st == DEGENERATE:
        raise DegenerateIntervalError("degenerate component interval")
    return x, lw


def log_q(plan: MixturePlan, model: IncrementModel, x: float) -> float:
    if plan.nominal:
        return float(model.log_pdf(x))
    d, k, c, _, logp, logm = plan.buffers()
    return log_density(*model.kernel, d, k, c, logp, logm, float(x))


def density(plan: MixturePlan, model: IncrementModel, x: float) -> float:
    return math.exp(log_q(plan, model, x))


def weight(plan: MixturePlan, model: IncrementModel, x: float) -> float:
    """log r_s(x) = log f(x) - log q_s(x)."""
    if not model.log_pdf(x) > -math.inf:
        raise ValueError(f"x={x} lies outside the support of the increment law")
    if plan.nominal:
        return 0.0
    d, k, c, _, logp, logm = plan.buffers()
    return log_weight(*model.kernel, d, k, c, logp, logm, float(x))


def component_intervals(plan: MixturePlan) -> list[tuple[float, float, bool]]:
    """Supports ``(lo, hi, reflected)`` of every component in ``[*, 1..k, **]`` order."""
    if plan.nominal:
        return [(-math.inf, math.inf, False)]
    c, k = plan.cutoffs, plan.k
    out = [(-math.inf, float(c[0]), False)]
    for j in range(1, k + 1):
        out.append((float(c[j - 1]), float(c[j]), j == k))
    out.append((float(c[k]), math.inf, False))
    return out


def parse_rule(rule) -> tuple[int, float]:
    """``("frac", 0.9)`` or ``"frac:0.9"`` into a kernel rule pair."""
    if isinstance(rule, str):
        name, _, val = rule.partition(":")
        rule = (name, float(val))
    name, val = rule
    if name not in RULE_NAMES:
        raise ValueError(f"unknown cutoff rule {name!r}; expected one of {sorted(RULE_NAMES)}")
    return RULE_NAMES[name], float(val)


def parse_rule_pair(rule) -> tuple[str, float]:
    """Normalise a cutoff rule to ``(name, value)``."""
    kind, val = parse_rule(rule)
    names = {v: k for k, v in RULE_NAMES.items()}
    return names[kind], val
