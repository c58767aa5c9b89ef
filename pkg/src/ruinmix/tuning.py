"""Tuning constants of the mixture change of measure and their numeric verifiers.

Parameter selection follows a fixed recipe:

* cutoff lattice ``a_1 < ... < a_{k-1}`` from the concavity of ``x -> x^beta0``
  (hazard-concave models only; regularly varying models use a single cutoff);
* ``theta``, ``eps_tilde``, ``eps_tilde1`` in closed form from ``delta0`` and ``mu``;
* ``kappa`` by doubling from its closed-form floor until the nominal threshold
  ``eta_star = G^{-1}(kappa^{-1/(1+gamma)})`` clears ``eta_floor`` and, unless
  disabled, until the Lyapunov inequality holds on a probe grid of distances.

``verify_lyapunov`` and ``verify_drift`` evaluate the supermartingale
inequalities by quadrature, split at every cutoff and at the point where the
Lyapunov function caps at 1.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import integrate, optimize

from . import sampler as smp
from .hazard import IncrementModel, TailClass, log_pdf as _k_log_pdf

TOL_LYAP = 1e-6
QUAD_EPSREL = 1e-11
MAX_HALVINGS = 60
MAX_KAPPA_DOUBLINGS = 400
RHO_MAX = 1e12


class Mode(enum.Enum):
    STRONG_EFFICIENCY = "strong_efficiency"
    TERMINATION = "termination"
    GAMMA_MOMENT = "gamma_moment"
    TOTAL_VARIATION = "total_variation"


class TuningError(ValueError):
    pass


@dataclass(frozen=True)
class TuningParams:
    mode: Mode
    a_star: float
    a_star_star: float
    delta0: float
    sigma1: float
    sigma2: float
    a_grid: tuple[float, ...]
    k: int
    theta: float
    eps_tilde: float
    eps_tilde1: float
    kappa: float
    eta_star: float
    gamma: float = 1.0
    delta1: float = math.nan
    delta2: float = math.nan
    rho: float = math.nan
    eta_floor: float = 0.0
    tv_eps: float = math.nan
    regularly_varying: bool = False
    cutoff_override: tuple[tuple[str, float], ...] = ()
    _packed: Any = field(default=None, repr=False, compare=False)

    def packed(self):
        """Arrays consumed by the numba plan kernel."""
        if self._packed is None:
            P = np.zeros(smp.N_PACKED)
            P[smp.P_A_STAR] = self.a_star
            P[smp.P_A_SS] = self.a_star_star
            P[smp.P_THETA] = self.theta
            P[smp.P_EPS] = self.eps_tilde
            P[smp.P_EPS1] = self.eps_tilde1
            P[smp.P_LOG_KAPPA] = math.log(self.kappa)
            P[smp.P_GAMMA] = self.gamma
            P[smp.P_REG_VAR] = 1.0 if self.regularly_varying else 0.0
            P[smp.P_LOG_THETA_1G] = math.log(self.theta * (1.0 + self.gamma))
            P[smp.P_LOG_EPS] = math.log(self.eps_tilde)
            P[smp.P_LOG_EPS1] = math.log(self.eps_tilde1)
            rules = [smp.parse_rule(r) for r in self.cutoff_override]
            rk = np.array([r[0] for r in rules], dtype=np.int64)
            rv = np.array([r[1] for r in rules], dtype=float)
            agrid = np.array(self.a_grid, dtype=float)
            object.__setattr__(self, "_packed", (P, agrid, rk, rv))
        return self._packed

    def replace(self, **changes) -> "TuningParams":
        changes.setdefault("_packed", None)
        return dataclasses.replace(self, **changes)

    def log_g(self, model: IncrementModel, d: float) -> float:
        """log of the Lyapunov function min(kappa G(d)^(1+gamma), 1) at distance d."""
        return min(math.log(self.kappa) + (1.0 + self.gamma) * model.log_integrated_tail(d), 0.0)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name.startswith("_"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, Mode):
                v = v.value
            elif isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TuningParams":
        d = dict(d)
        d["mode"] = Mode(d["mode"])
        d["a_grid"] = tuple(d["a_grid"])
        d["cutoff_override"] = tuple(tuple(r) for r in d.get("cutoff_override", ()))
        return cls(**d)


# ---------------------------------------------------------------------------
# step formulas
# ---------------------------------------------------------------------------


def build_cutoff_grid(beta0: float):
    """Cutoff fractions for a hazard-concave tail of index ``beta0``.

    Returns ``(sigma1, a_grid, k, sigma2)``; ``k`` counts the intermediate
    components, i.e. one more than the number of interior fractions.
    """
    if not 0.0 < beta0 < 1.0:
        raise TuningError("beta0 must lie in (0, 1)")
    sigma1 = None
    for cand in np.round(np.arange(0.5, 0.0, -0.05), 10):
        x = np.linspace(0.0, cand, 10_000)
        if np.all(2.0 - 2.0 * (1.0 - x) ** beta0 - x**beta0 <= 1e-15):
            sigma1 = float(cand)
            break
    if sigma1 is None:
        raise TuningError(f"no admissible sigma1 for beta0={beta0}; the tail is too light")
    half = sigma1 / 2.0
    n = int(math.floor((1.0 - half) / half + 1e-9))
    a = tuple(round(half * (j + 1), 12) for j in range(n))
    if len(a) < 2:
        raise TuningError("cutoff lattice needs at least two interior fractions")
    sigma2 = min(a[j] ** beta0 + (1.0 - a[j + 1]) ** beta0 for j in range(len(a) - 1)) - 1.0
    if not sigma2 > 0.0:
        raise TuningError(f"cutoff lattice separation is not positive (sigma2={sigma2})")
    return sigma1, a, len(a) + 1, sigma2


def theta_strong(mu: float, delta0: float) -> float:
    return abs(mu) * (1.0 - delta0) / (1.0 + delta0) ** 5


def theta_gamma(mu: float, delta: float, gamma: float) -> float:
    return abs(mu) * (1.0 - delta) ** 2 / (gamma * (1.0 + delta))


def kappa_floor(mode: Mode, a_ss: float, theta: float, delta: float, gamma: float, mu: float) -> float:
    if mode is Mode.GAMMA_MOMENT:
        return (2.0 * math.exp(a_ss * (1.0 + gamma))
                / ((1.0 + gamma) ** (1.0 + gamma) * theta**gamma * abs(mu) * delta * (1.0 - delta)))
    return math.exp(2.0 * a_ss) / (4.0 * theta**2 * delta)


def termination_margin(iota: float, a_ss: float, delta0: float) -> float:
    """Expected-drift surplus of the termination argument; must be positive."""
    return (2.0 * (iota - 1.0) * (1.0 - delta0) ** 2 * (1.0 + delta0) ** -5 * math.exp(-a_ss)
            - 1.0 - 2.0 * (1.0 - math.exp(-2.0 * a_ss / iota)) * (iota - 1.0))


def gamma_termination_margin(iota: float, a_ss: float, delta: float, gamma: float) -> float:
    return ((1.0 + gamma) * (iota - 1.0) * (1.0 - delta) ** 3 * math.exp(-a_ss)
            / (gamma * (1.0 + delta))
            - 1.0 - (1.0 + gamma) * (1.0 - math.exp(-2.0 * a_ss / iota)) * (iota - 1.0))


def inverse_integrated_tail(model: IncrementModel, log_target: float) -> float:
    """x with log G(x) = log_target."""
    lo = model.support_min if math.isfinite(model.support_min) else -1.0
    while model.log_integrated_tail(lo) < log_target:
        lo = 2.0 * lo - 1.0 if lo < 0 else -1.0
    hi = max(lo + 1.0, 1.0)
    while model.log_integrated_tail(hi) > log_target:
        hi *= 2.0
    return optimize.brentq(lambda x: model.log_integrated_tail(x) - log_target, lo, hi,
                           xtol=1e-12, rtol=1e-15, maxiter=500)


def eta_for_kappa(model: IncrementModel, kappa: float, gamma: float) -> float:
    return inverse_integrated_tail(model, -math.log(kappa) / (1.0 + gamma))


def ordering_floor(model: IncrementModel, params: TuningParams, d_max: float = 1e8) -> float:
    """Smallest distance on a geometric lattice beyond which every plan is well formed."""
    P, agrid, rk, rv = params.packed()
    P = P.copy()
    P[smp.P_LOG_KAPPA] = -np.inf  # never nominal
    c, prob, logp, logm = smp.new_buffers(max(smp.K_MAX, agrid.size + 2))
    grid = np.geomspace(1e-2, d_max, 801)
    last_bad = -1
    for i, d in enumerate(grid):
        status, _ = smp.build_plan(*model.kernel, P, agrid, rk, rv, d, c, prob, logp, logm)
        if status != smp.PLAN_IS:
            last_bad = i
    if last_bad == grid.size - 1:
        raise TuningError("mixture plans are ill formed at every probed distance")
    return 0.0 if last_bad < 0 else float(grid[last_bad + 1])


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

DEFAULTS = {
    TailClass.REGULARLY_VARYING: {"a_star": 0.1, "a_star_star": 0.1},
    TailClass.CONCAVE_HAZARD: {"a_star": 2.0, "a_star_star": 0.1},
}
OVERRIDE_KEYS = {"a_star", "a_star_star", "delta0", "kappa", "eta_floor", "cutoff_override",
                 "epsilon", "lyapunov_probe"}


def select_variance_params(model: IncrementModel, mode: Mode = Mode.STRONG_EFFICIENCY,
                           user_overrides: dict[str, Any] | None = None,
                           gamma: float = 1.0, _delta: float | None = None) -> TuningParams:
    """Constructive parameter choice for the given mode."""
    ov = dict(user_overrides or {})
    unknown = set(ov) - OVERRIDE_KEYS
    if unknown:
        raise TuningError(f"unknown tuning overrides: {sorted(unknown)}")
    if not model.mean_drift < 0:
        raise TuningError("the walk must have negative drift")
    mu = model.mean_drift
    defaults = DEFAULTS[model.tail_class]
    a_star = float(ov.get("a_star", defaults["a_star"]))
    a_ss = float(ov.get("a_star_star", defaults["a_star_star"]))
    delta0 = float(ov.get("delta0", 0.1))
    if not 0.0 < delta0 < 0.25:
        raise TuningError("delta0 must lie in (0, 1/4)")
    rules = tuple((str(n), float(v)) for n, v in
                  (smp.parse_rule_pair(r) for r in ov.get("cutoff_override", ())))

    rv = model.tail_class is TailClass.REGULARLY_VARYING
    if rv:
        sigma1, sigma2, a_grid, k = math.nan, math.nan, (), 0
    else:
        sigma1, a_grid, k, sigma2 = build_cutoff_grid(model.tail_index)
    if rules:
        k = len(rules) - 1

    tv_eps = math.nan
    if mode is Mode.TOTAL_VARIATION:
        tv_eps = float(ov.get("epsilon", 0.05))
        if not 0.0 < tv_eps < 1.0:
            raise TuningError("epsilon must lie in (0, 1)")
        theta = abs(mu) * (1.0 - tv_eps) / 2.0
        eps_t, eps_t1 = tv_eps, tv_eps**2
        delta_k = tv_eps
        gamma = 1.0
    elif mode is Mode.GAMMA_MOMENT:
        delta = 0.1 if _delta is None else _delta
        theta = theta_gamma(mu, delta, gamma)
        eps_t, eps_t1 = delta**2, delta / (k + 1)
        delta_k = delta
        delta0 = delta
    else:
        theta = theta_strong(mu, delta0)
        eps_t, eps_t1 = delta0**2, delta0 / (k + 1)
        delta_k = delta0
        gamma = 1.0

    kfloor = kappa_floor(mode, a_ss, theta, delta_k, gamma, mu)
    base = TuningParams(
        mode=mode, a_star=a_star, a_star_star=a_ss, delta0=delta0, sigma1=sigma1, sigma2=sigma2,
        a_grid=a_grid, k=k, theta=theta, eps_tilde=eps_t, eps_tilde1=eps_t1, kappa=kfloor,
        eta_star=math.nan, gamma=gamma, delta1=delta0, tv_eps=tv_eps,
        regularly_varying=rv, cutoff_override=rules,
    )
    eta_floor = max(float(ov.get("eta_floor", 10.0 * abs(mu))), ordering_floor(model, base))

    if "kappa" in ov:
        kappa = float(ov["kappa"])
        return base.replace(kappa=kappa, eta_star=eta_for_kappa(model, kappa, gamma),
                            eta_floor=eta_floor)

    kappa = kfloor
    for _ in range(MAX_KAPPA_DOUBLINGS):
        if eta_for_kappa(model, kappa, gamma) >= eta_floor:
            break
        kappa *= 2.0
    params = base.replace(kappa=kappa, eta_star=eta_for_kappa(model, kappa, gamma),
                          eta_floor=eta_floor)
    if ov.get("lyapunov_probe", not rules):
        params = _grow_kappa_until_supermartingale(model, params)
    return params


def _probe_distances(params: TuningParams, n: int = 48) -> np.ndarray:
    eta = params.eta_star
    return np.concatenate([eta * (1.0 + np.geomspace(1e-6, 1e-1, 8)),
                           np.geomspace(eta * 1.2, max(eta * 1e4, 1e6), n - 8)])


def _grow_kappa_until_supermartingale(model: IncrementModel, params: TuningParams) -> TuningParams:
    for _ in range(MAX_KAPPA_DOUBLINGS):
        ratios = [lyapunov_ratio(model, params, d) for d in _probe_distances(params)]
        if max(ratios) <= 1.0:
            return params
        kappa = 2.0 * params.kappa
        params = params.replace(kappa=kappa, eta_star=eta_for_kappa(model, kappa, params.gamma))
    raise TuningError("Lyapunov inequality could not be established by growing kappa")


def enforce_termination_params(params: TuningParams, model: IncrementModel) -> TuningParams:
    """Shrink ``a_**`` and ``delta0`` until the termination drift surplus is positive."""
    if model.tail_class is not TailClass.REGULARLY_VARYING:
        raise TuningError("termination control is implemented for regularly varying tails")
    iota = model.tail_index
    a_ss, delta0 = params.a_star_star, params.delta0
    overrides = {"a_star": params.a_star, "cutoff_override": params.cutoff_override}
    for _ in range(MAX_HALVINGS + 1):
        margin = termination_margin(iota, a_ss, delta0)
        if margin > 0.0:
            out = select_variance_params(
                model, Mode.TERMINATION,
                {**overrides, "a_star_star": a_ss, "delta0": delta0,
                 "eta_floor": params.eta_floor})
            return out.replace(delta2=margin)
        a_ss, delta0 = a_ss / 2.0, delta0 / 2.0
    raise TuningError(
        f"no termination-controlled parameters exist for tail index {iota} (needs > 1.5)"
    )


def select_gamma_params(model: IncrementModel, gamma: float,
                        user_overrides: dict[str, Any] | None = None) -> TuningParams:
    """Parameters bounding the (1+gamma)-th moment of the estimator."""
    if model.tail_class is not TailClass.REGULARLY_VARYING:
        raise TuningError("gamma-moment mode is implemented for regularly varying tails")
    iota = model.tail_index
    upper = (iota - 1.0) / (2.0 - iota) if iota < 2.0 else math.inf
    if not 0.0 < gamma < upper:
        raise TuningError(f"gamma={gamma} outside the admissible range (0, {upper:.6g})")
    ov = dict(user_overrides or {})
    a_ss = float(ov.pop("a_star_star", DEFAULTS[model.tail_class]["a_star_star"]))
    delta = 0.1
    for _ in range(MAX_HALVINGS + 1):
        margin = gamma_termination_margin(iota, a_ss, delta, gamma)
        if margin > 0.0:
            p = select_variance_params(model, Mode.GAMMA_MOMENT, {**ov, "a_star_star": a_ss},
                                       gamma=gamma, _delta=delta)
            return p.replace(delta2=margin)
        a_ss, delta = a_ss / 2.0, delta / 2.0
    raise TuningError("no admissible gamma-moment parameters found")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


@dataclass
class VerificationReport:
    kind: str
    b: float
    s: np.ndarray
    log_g: np.ndarray
    values: np.ndarray
    passed: bool
    tol: float
    rho: float = math.nan
    failures: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        active = self.log_g < 0
        vals = self.values[active] if active.any() else self.values
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            return math.nan
        return float(vals.max() if self.kind == "lyapunov" else vals.min())

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind, "b": self.b, "passed": self.passed, "tol": self.tol,
            "worst": self.worst, "rho": self.rho, "failures": self.failures,
            "s": self.s.tolist(), "g_below_one": (self.log_g < 0).tolist(),
            "values": self.values.tolist(),
        }


def _plan_at(model: IncrementModel, params: TuningParams, d: float) -> smp.MixturePlan:
    return smp.plan_for_state(model, params, d, 0.0)


def _quad(fn, a, b, **kw):
    # tiny-weight regions trigger roundoff warnings without affecting the result
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return integrate.quad(fn, a, b, **kw)


def _expect_f(model: IncrementModel, phi, lo: float, hi: float, breaks: Iterable[float] = ()) -> float:
    """int_lo^hi phi(x) f(x) dx / P(lo < X <= hi) via the map y = Lambda(x)."""
    if not hi > lo:
        return 0.0
    y_lo = 0.0 if lo == -math.inf else float(model.cumulative_hazard(lo))
    y_hi = math.inf if hi == math.inf else float(model.cumulative_hazard(hi))
    if not y_hi > y_lo:
        return 0.0
    inv = model.inverse_cumulative_hazard
    pts = sorted({float(model.cumulative_hazard(b)) - y_lo for b in breaks if lo < b < hi})

    def integrand(t):
        return phi(inv(y_lo + t)) * math.exp(-t)

    span = y_hi - y_lo
    edges = [0.0] + [p for p in pts if 0.0 < p < span] + [span]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = _quad(integrand, a, b, epsabs=0.0, epsrel=QUAD_EPSREL, limit=400)
        total += val
    norm = -math.expm1(-span) if math.isfinite(span) else 1.0
    return total / norm


def _log_integral_f(model: IncrementModel, logphi, lo: float, hi: float,
                    breaks: Iterable[float] = ()) -> float:
    """log of int_lo^hi exp(logphi(x)) f(x) dx, integrated in y = Lambda(x)."""
    if not hi > lo:
        return -math.inf
    y_lo = 0.0 if lo == -math.inf else float(model.cumulative_hazard(lo))
    y_hi = math.inf if hi == math.inf else float(model.cumulative_hazard(hi))
    if not y_hi > y_lo:
        return -math.inf
    inv = model.inverse_cumulative_hazard
    span = y_hi - y_lo

    def lint(t):
        return logphi(inv(y_lo + t)) - t

    pts = sorted({float(model.cumulative_hazard(b)) - y_lo for b in breaks if lo < b < hi})
    edges = [0.0] + [p for p in pts if 0.0 < p < span] + [span]
    reach = span if math.isfinite(span) else max(edges[-2], 0.0) + 60.0
    probe = np.concatenate([np.linspace(0.0, reach, 201), edges[1:-1]])
    vals = [lint(t) for t in probe]
    shift = max(v for v in vals if v == v)
    if shift == -math.inf:
        return -math.inf
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = _quad(lambda t: math.exp(lint(t) - shift), a, b,
                                epsabs=0.0, epsrel=QUAD_EPSREL, limit=400)
        total += val
    return shift + math.log(total) - y_lo if total > 0 else -math.inf


def _log_integral_x(lint, lo: float, hi: float, breaks: Iterable[float] = ()) -> float:
    """log of int_lo^hi exp(lint(x)) dx over a finite interval."""
    pts = [p for p in breaks if lo < p < hi]
    probe = np.concatenate([np.linspace(lo, hi, 201)[1:-1], pts])
    shift = max(lint(x) for x in probe)
    if shift == -math.inf:
        return -math.inf
    val, _ = _quad(lambda x: math.exp(lint(x) - shift), lo, hi, points=pts or None,
                            epsabs=0.0, epsrel=QUAD_EPSREL, limit=400)
    return shift + math.log(val) if val > 0 else -math.inf


def _logsumexp(terms) -> float:
    terms = [t for t in terms if t > -math.inf]
    if not terms:
        return -math.inf
    m = max(terms)
    return m + math.log(math.fsum(math.exp(t - m) for t in terms))


def lyapunov_ratio(model: IncrementModel, params: TuningParams, d: float) -> float:
    """E[r(X)^gamma g(s+X)] / g(s) at distance d = b - s."""
    gam = params.gamma
    lg_d = params.log_g(model, d)
    lGd = model.log_integrated_tail(d)
    cap = d - params.eta_star  # g(s+x) = 1 for x >= cap
    kern = model.kernel

    def log_g_rel(x):
        # log of g(s+x) / g(s)
        return min((1.0 + gam) * (model.log_integrated_tail(d - x) - lGd), -lg_d)

    plan = _plan_at(model, params, d)
    if plan.nominal:
        return math.exp(_log_integral_f(model, log_g_rel, -math.inf, math.inf, (cap,)))

    terms = []
    dd, k, c, _, logp, logm = plan.buffers()
    for j, (lo, hi, refl) in enumerate(smp.component_intervals(plan)):
        if refl:
            def lint(x):
                lw = smp.log_weight(*kern, dd, k, c, logp, logm, x)
                return _k_log_pdf(*kern, x) + gam * lw + log_g_rel(x)
            terms.append(_log_integral_x(lint, lo, hi, (cap,)))
        else:
            lw = float(logm[j] - logp[j])
            terms.append(gam * lw + _log_integral_f(model, log_g_rel, lo, hi, (cap,)))
    return math.exp(_logsumexp(terms))


def verify_lyapunov(model: IncrementModel, params: TuningParams, b: float,
                    s_grid: Sequence[float], tol: float = TOL_LYAP) -> VerificationReport:
    """Check ``E[r_s(X)^gamma g(s+X)] <= g(s)`` at each state of ``s_grid``."""
    s = np.asarray(s_grid, dtype=float)
    if np.any(s >= b):
        raise ValueError("grid states must lie below the barrier")
    ratios = np.empty(s.size)
    lg = np.empty(s.size)
    failures = []
    for i, si in enumerate(s):
        d = b - si
        lg[i] = params.log_g(model, d)
        try:
            ratios[i] = lyapunov_ratio(model, params, d)
        except (ValueError, integrate.IntegrationWarning) as exc:
            ratios[i] = math.nan
            failures.append(f"s={si:.6g}: {exc}")
            continue
        if not ratios[i] <= 1.0 + tol:
            failures.append(f"s={si:.6g}: ratio {ratios[i]:.9g}")
    return VerificationReport("lyapunov", float(b), s, lg, ratios, not failures, tol,
                              failures=failures)


def _drift_parts(model: IncrementModel, params: TuningParams, d: float, power: float):
    """(A, B) with h(s) - E^Q h(s+X) = A + rho*B and h(y) = (rho + (b-y)^power) 1(y < b)."""
    h = lambda x: (d - x) ** power if x < d else 0.0  # noqa: E731
    plan = _plan_at(model, params, d)
    eh = 0.0
    q_below = 0.0
    for j, (lo, hi, refl) in enumerate(smp.component_intervals(plan)):
        if plan.nominal:
            pj, lm = 1.0, 0.0
        else:
            pj, lm = float(plan.probs[j]), float(plan.log_masses[j])
        if refl:
            # x = d - y with y on (d - c_k, d - c_{k-1}]; there h = y^power for y > 0
            ylo, yhi = d - hi, d - lo
            ylo_pos = max(ylo, 0.0)
            if yhi > ylo_pos:
                m = math.exp(model.log_interval_mass(ylo_pos, yhi))
                eh += pj * m / math.exp(lm) * _expect_f(model, lambda y: y**power, ylo_pos, yhi)
                q_below += pj * m / math.exp(lm)
            continue
        top = min(hi, d)
        if top <= lo:
            continue
        m = math.exp(model.log_interval_mass(lo, top))
        if m == 0.0:
            continue
        # the open endpoint at x = d carries no mass
        eh += pj * m / math.exp(lm) * _expect_f(model, h, lo, top)
        q_below += pj * m / math.exp(lm)
    a = d**power - eh
    return a, 1.0 - q_below, plan.nominal


def verify_drift(model: IncrementModel, params: TuningParams, b: float,
                 s_grid: Sequence[float], rho: float | None = None) -> VerificationReport:
    """Margins ``h(s) - E^Q h(s+X)`` of the termination drift function.

    ``rho`` is chosen, unless given, as the smallest value (times 1.01) that
    makes the margin non-negative on the grid points where the chain moves
    nominally; it can only raise the margin elsewhere.
    """
    power = 1.0 if model.tail_class is TailClass.REGULARLY_VARYING else 1.0 - model.tail_index
    s = np.asarray(s_grid, dtype=float)
    parts = [_drift_parts(model, params, b - si, power) for si in s]
    lg = np.array([params.log_g(model, b - si) for si in s])
    failures = []
    if rho is None:
        need = [-a / bb for a, bb, nom in parts if nom and a < 0 and bb > 0]
        rho = 1.01 * max(need) if need else 0.0
        if rho > RHO_MAX:
            worst = s[int(np.argmax([(-a / bb if nom and bb > 0 else -np.inf)
                                     for a, bb, nom in parts]))]
            failures.append(f"no rho <= {RHO_MAX:g} gives a positive margin near s={worst:.6g}")
            rho = RHO_MAX
    margins = np.array([a + rho * bb for a, bb, _ in parts])
    for si, m in zip(s, margins):
        if not m >= 0.0:
            failures.append(f"s={si:.6g}: margin {m:.6g}")
    return VerificationReport("drift", float(b), s, lg, margins, not failures, 0.0,
                              rho=float(rho), failures=failures)


def default_s_grid(b: float, n: int = 50) -> np.ndarray:
    """States spanning far below the origin up to just under the barrier."""
    d = np.geomspace(1e-3 * max(b, 1.0), 10.0 * max(b, 1.0), n)
    return np.sort(b - d)
