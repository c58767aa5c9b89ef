"""Asymptotic formulas and distributional diagnostics for the ruin event.

Conditional laws are checked by self-normalized reweighting of IS output: a
replication with likelihood ratio ``L`` gets weight ``L / sum(L)``, which turns
samples of the proposal walk into samples of the walk conditioned on ruin.
KS thresholds here (0.05) are desk-scale choices.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import integrate, special

from . import engine
from . import sampler as smp
from .hazard import IncrementModel, TailClass
from .tuning import Mode, TuningParams

KS_THRESHOLD = 0.05
N_MIN = 1000
JOINT_GRID = (0.25, 0.5, 1.0)


class InsufficientSampleError(ValueError):
    pass


class ResidualDensityError(RuntimeError):
    """The coupling residual ``q_s - p(s) f`` went negative."""


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def pv_approx(model: IncrementModel, b: float) -> float:
    """log of G(b)/|mu|, the large-b ruin approximation."""
    return float(model.log_integrated_tail(b)) - math.log(abs(model.mean_drift))


def tv_upper_bound(second_moment: float, u_squared: float, return_flag: bool = False):
    """Total variation bound sqrt(E Z^2 / u^2 - 1), clamped to [0, 1].

    With ``return_flag`` also returns whether clamping happened (noise pushed
    the second moment below u^2, or the bound exceeded 1).
    """
    if not u_squared > 0:
        raise ValueError("u_squared must be positive")
    excess = second_moment / u_squared - 1.0
    clamped = not 0.0 <= excess <= 1.0
    value = math.sqrt(min(max(excess, 0.0), 1.0))
    return (value, clamped) if return_flag else value


@dataclass(frozen=True)
class LimitLaw:
    """Law of ``scale * Y`` with ``P(Y > t) = S(t) ** power``.

    ``S`` is ``(1 + t/(iota-1))^-(iota-1)`` for ``kind="pareto"`` and ``e^-t``
    for ``kind="exponential"``.
    """

    kind: str
    iota: float = math.nan
    power: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("pareto", "exponential"):
            raise ValueError(f"unknown limit law {self.kind!r}")
        if self.kind == "pareto" and not self.iota > 1.0:
            raise ValueError("the Pareto-type law needs iota > 1")
        if not (self.power > 0 and self.scale > 0):
            raise ValueError("power and scale must be positive")

    @classmethod
    def pareto(cls, iota: float) -> "LimitLaw":
        return cls("pareto", float(iota))

    @classmethod
    def exponential(cls) -> "LimitLaw":
        return cls("exponential")

    @classmethod
    def for_model(cls, model: IncrementModel) -> "LimitLaw":
        """Law of the normalized overshoot Y_1 for the model's tail class."""
        if model.tail_class is TailClass.REGULARLY_VARYING:
            return cls.pareto(model.tail_index)
        return cls.exponential()

    def scaled(self, c: float) -> "LimitLaw":
        return LimitLaw(self.kind, self.iota, self.power, self.scale * c)

    def powered(self, p: float) -> "LimitLaw":
        return LimitLaw(self.kind, self.iota, self.power * p, self.scale)

    def log_survival(self, t):
        u = np.maximum(np.asarray(t, dtype=float) / self.scale, 0.0)
        if self.kind == "pareto":
            a = self.iota - 1.0
            base = -a * np.log1p(u / a)
        else:
            base = -u
        out = self.power * base
        return float(out) if out.ndim == 0 else out

    def survival(self, t):
        return np.exp(self.log_survival(t))

    def cdf(self, t):
        return -np.expm1(self.log_survival(t))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def tau_law(model: IncrementModel) -> LimitLaw:
    """Limit of tau_b / a(b) given ruin: Y_0 / |mu|, with Y_0 distributed like Y_1."""
    return LimitLaw.for_model(model).scaled(1.0 / abs(model.mean_drift))


def decoupling_law(model: IncrementModel, theta: float) -> LimitLaw:
    """Limit of N_b / a(b) under the proposal: Z_theta / |mu|."""
    mu = abs(model.mean_drift)
    return LimitLaw.for_model(model).powered(2.0 * theta / mu).scaled(1.0 / mu)


# ---------------------------------------------------------------------------
# weighted empirical laws
# ---------------------------------------------------------------------------


def normalized_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    w = np.exp(log_w - log_w.max())
    return w / math.fsum(w)


def weighted_ks(x: np.ndarray, w: np.ndarray, cdf) -> float:
    """sup |F_w - F| for the weighted empirical CDF of ``x`` (``w`` sums to 1)."""
    order = np.argsort(x, kind="stable")
    xs = np.asarray(x, dtype=float)[order]
    cum = np.cumsum(np.asarray(w, dtype=float)[order])
    # ties: the ECDF jumps once per distinct value
    last = np.r_[xs[1:] != xs[:-1], True]
    xs, hi = xs[last], cum[last]
    lo = np.r_[0.0, hi[:-1]]
    f = np.asarray(cdf(xs), dtype=float)
    return float(max(np.max(np.abs(hi - f)), np.max(np.abs(lo - f))))


def effective_sample_size(w: np.ndarray) -> float:
    return 1.0 / float(np.sum(np.square(w)))


def ecdf_table(x: np.ndarray, w: np.ndarray, cdf, points: int = 101) -> dict[str, list[float]]:
    """Weighted ECDF against a reference CDF at evenly spaced sample quantiles."""
    order = np.argsort(x, kind="stable")
    xs = np.asarray(x, dtype=float)[order]
    cum = np.cumsum(np.asarray(w, dtype=float)[order])
    qs = np.linspace(0.0, 1.0, points)
    idx = np.minimum(np.searchsorted(cum, qs, side="left"), xs.size - 1)
    grid = np.unique(xs[idx])
    emp = cum[np.searchsorted(xs, grid, side="right") - 1]
    return {"x": grid.tolist(), "empirical": emp.tolist(),
            "reference": np.asarray(cdf(grid), dtype=float).tolist()}


def _normal_half_cdf(t):
    # N(0, 1/2) has cdf Phi(t * sqrt 2) = (1 + erf(t)) / 2
    return 0.5 * (1.0 + special.erf(np.asarray(t, dtype=float)))


# ---------------------------------------------------------------------------
# conditional-law diagnostics
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    b: float
    n_accepted: int
    a_b: float
    sigma2: float
    ess: float
    ks: dict[str, float]
    ks_threshold: float
    passed: dict[str, bool]
    joint: list[dict[str, float]] = field(default_factory=list)
    joint_passed: bool = True
    ecdf: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    note: str = "KS thresholds and grid sizes are desk-scale choices"

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values()) and self.joint_passed

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["all_passed"] = self.all_passed
        return d


def _as_arrays(results):
    if isinstance(results, engine.Batch):
        ok = results.status == engine.HIT
        return (results.log_z[ok], results.tau[ok].astype(float), results.s_tau[ok],
                results.s_mid[ok])
    rows = [r for r in results if r.hit]
    for r in rows:
        if r.path is None:
            raise ValueError("conditional diagnostics need recorded paths")
    return (np.array([r.log_estimate for r in rows]), np.array([float(r.tau) for r in rows]),
            np.array([r.path[r.tau] for r in rows]), np.array([r.path[r.tau // 2] for r in rows]))


def conditional_diagnostics(results, model: IncrementModel, b: float, n_min: int = N_MIN,
                            ks_threshold: float = KS_THRESHOLD, bootstrap: int = 200,
                            seed: int = 0, table_points: int = 101) -> DiagnosticsReport:
    """Compare reweighted IS paths with the conditional limit laws given ruin.

    ``results`` is an :class:`engine.Batch` produced with ``record=True`` or a
    sequence of :class:`engine.ReplicationResult` carrying paths.
    """
    log_z, tau, s_tau, s_mid = _as_arrays(results)
    n = log_z.size
    if n < n_min:
        raise InsufficientSampleError(f"{n} accepted paths, need at least {n_min}")
    if np.isnan(s_mid).any():
        raise ValueError("midpoints missing; simulate with record=True")
    w = normalized_weights(log_z)
    mu = model.mean_drift
    a_b = float(model.mean_excess_scale(b))
    sigma2 = float(model.variance)
    y_law = LimitLaw.for_model(model)

    samples = {
        "tau": (tau / a_b, tau_law(model).cdf),
        "overshoot": ((s_tau - b) / a_b, y_law.cdf),
        "midpoint": ((s_mid - 0.5 * tau * mu) / np.sqrt(sigma2 * tau), _normal_half_cdf),
    }
    ks = {k: weighted_ks(x, w, cdf) for k, (x, cdf) in samples.items()}
    ecdf = {k: ecdf_table(x, w, cdf, table_points) for k, (x, cdf) in samples.items()}

    y0 = tau * abs(mu) / a_b
    y1 = samples["overshoot"][0]
    joint, joint_ok = _joint_check(y0, y1, w, y_law, bootstrap, seed)
    return DiagnosticsReport(
        b=float(b), n_accepted=int(n), a_b=a_b, sigma2=sigma2, ess=effective_sample_size(w),
        ks=ks, ks_threshold=ks_threshold, passed={k: v <= ks_threshold for k, v in ks.items()},
        joint=joint, joint_passed=joint_ok, ecdf=ecdf,
    )


def _joint_check(y0, y1, w, law: LimitLaw, bootstrap: int, seed: int):
    """P(Y0 > a, Y1 > c) against P(Y1 > a + c), both weighted, with bootstrap SE."""
    rng = np.random.default_rng(seed)
    n = w.size
    boots = [rng.integers(0, n, n) for _ in range(bootstrap)]
    rows, ok = [], True
    for a in JOINT_GRID:
        for c in JOINT_GRID:
            ind = ((y0 > a) & (y1 > c)).astype(float) - (y1 > a + c).astype(float)
            diff = float(np.dot(w, ind))
            reps = []
            for idx in boots:
                wb = w[idx]
                reps.append(float(np.dot(wb, ind[idx]) / wb.sum()))
            se = float(np.std(reps, ddof=1)) if bootstrap > 1 else math.nan
            within = abs(diff) <= 3.0 * se if se > 0 else diff == 0.0
            ok &= within
            rows.append({"y0": a, "y1": c, "joint": float(np.dot(w, (y0 > a) & (y1 > c))),
                         "shifted_marginal": float(np.dot(w, y1 > a + c)),
                         "limit": float(law.survival(a + c)), "difference": diff,
                         "bootstrap_se": se, "within_3se": bool(within)})
    return rows, bool(ok)


# ---------------------------------------------------------------------------
# coupling with the nominal walk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingResult:
    """``n_b`` is ``None`` when the walks never decoupled before the hit."""

    n_b: int | None
    tau: int
    status: int = engine.HIT

    @property
    def equal(self) -> bool:
        return self.n_b is not None and self.n_b == self.tau


def _require_tv(params: TuningParams):
    if params.mode is not Mode.TOTAL_VARIATION:
        raise ValueError("the coupling needs total-variation mode parameters")


def _raise_for(status: int, where: str):
    if status == engine.NEG_RESIDUAL:
        raise ResidualDensityError(
            f"negative residual density {where}; raise kappa or the nominal threshold")
    if status == engine.ERR_INCONSISTENT:
        raise smp.PlanInconsistencyError(f"mixture cutoffs out of order {where}")
    if status == engine.ERR_DEGENERATE:
        raise ValueError(f"degenerate mixture component {where}")


def coupled_replication(model: IncrementModel, tv_params: TuningParams, b: float,
                        rng: np.random.Generator,
                        max_steps: int = engine.MAX_STEPS) -> CouplingResult:
    """Run the proposal walk jointly with a nominal walk sharing increments."""
    _require_tv(tv_params)
    P, agrid, rk, rv = tv_params.packed()
    bufs = smp.new_buffers(max(smp.K_MAX, agrid.size + 2, rk.size + 1))
    st, n_b, tau = engine.coupled_path(*model.kernel, P, agrid, rk, rv, float(b), rng,
                                       max_steps, *bufs)
    _raise_for(st, "in the coupled replication")
    return CouplingResult(None if n_b < 0 else int(n_b), int(tau), int(st))


@dataclass
class CouplingBatch:
    n_b: np.ndarray
    tau: np.ndarray
    status: np.ndarray

    @staticmethod
    def concat(parts: Sequence["CouplingBatch"]) -> "CouplingBatch":
        return CouplingBatch(*(np.concatenate([getattr(p, f) for p in parts])
                               for f in ("n_b", "tau", "status")))


def _coupling_block(model, params, b, seed, start, stop, max_steps):
    P, agrid, rk, rv = params.packed()
    bufs = smp.new_buffers(max(smp.K_MAX, agrid.size + 2, rk.size + 1))
    n = stop - start
    out = CouplingBatch(np.empty(n, np.int64), np.empty(n, np.int64), np.empty(n, np.int64))
    kern = model.kernel
    for i in range(n):
        st, n_b, tau = engine.coupled_path(*kern, P, agrid, rk, rv, float(b),
                                           engine.stream(seed, start + i), max_steps, *bufs)
        out.n_b[i], out.tau[i], out.status[i] = n_b, tau, st
    return out


@dataclass
class CouplingReport:
    b: float
    n: int
    theta: float
    a_b: float
    equal_fraction: float
    equal_threshold: float
    never_decoupled: int
    censored: int
    ks_decoupling: float
    ks_threshold: float
    ecdf: dict[str, list[float]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.equal_fraction >= self.equal_threshold and self.ks_decoupling <= self.ks_threshold

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def coupling_experiment(model: IncrementModel, tv_params: TuningParams, b: float, n: int,
                        seed: int, shards: int = 1, workers: int | None = None,
                        equal_threshold: float = 0.9, ks_threshold: float = KS_THRESHOLD,
                        max_steps: int = engine.MAX_STEPS) -> CouplingReport:
    """Frequency of tau_b = N_b and the law of N_b / a(b) over ``n`` coupled replications."""
    _require_tv(tv_params)
    batch = engine._fan_out(_coupling_block,
                            lambda lo, hi: (model, tv_params, b, seed, lo, hi, max_steps),
                            n, shards, workers, concat=CouplingBatch.concat)
    for code in (engine.NEG_RESIDUAL, engine.ERR_INCONSISTENT, engine.ERR_DEGENERATE):
        idx = np.flatnonzero(batch.status == code)
        if idx.size:
            _raise_for(code, f"in replication {int(idx[0])} ({idx.size} affected)")
    a_b = float(model.mean_excess_scale(b))
    decoupled = batch.n_b >= 0
    x = batch.n_b[decoupled] / a_b
    law = decoupling_law(model, tv_params.theta)
    w = np.full(x.size, 1.0 / max(x.size, 1))
    ks = weighted_ks(x, w, law.cdf) if x.size else math.nan
    hit = batch.status == engine.HIT
    return CouplingReport(
        b=float(b), n=int(n), theta=tv_params.theta, a_b=a_b,
        equal_fraction=float(np.count_nonzero(hit & (batch.n_b == batch.tau))) / n,
        equal_threshold=equal_threshold, never_decoupled=int(np.count_nonzero(~decoupled)),
        censored=int(np.count_nonzero(batch.status == engine.CENSORED)),
        ks_decoupling=ks, ks_threshold=ks_threshold,
        ecdf=ecdf_table(x, w, law.cdf) if x.size else {},
    )


def coupling_probability(plan: smp.MixturePlan) -> float:
    """p(s) = p_* / P(X <= c_0); 1 on nominal states."""
    if plan.nominal:
        return 1.0
    return math.exp(plan.log_probs[0] - plan.log_masses[0])


def residual_mass(model: IncrementModel, plan: smp.MixturePlan) -> float:
    """Integral of (q_s - p(s) f)^+ / (1 - p(s)); equals 1 when the residual is a density."""
    p = coupling_probability(plan)
    if p >= 1.0:
        return 1.0
    total = 0.0
    for j, (lo, hi, reflected) in enumerate(smp.component_intervals(plan)):
        if not reflected:
            # q_s = (p_j / m_j) f on this interval
            total += max(math.exp(plan.log_probs[j]) - p * math.exp(plan.log_masses[j]), 0.0)
            continue

        def resid(x):
            return max(smp.density(plan, model, x) - p * float(model.pdf(x)), 0.0)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, _ = integrate.quad(resid, lo, hi, epsabs=0.0, epsrel=1e-10, limit=400)
        total += val
    return total / (1.0 - p)

