"""Heavy-tailed increment laws: tails, hazards, integrated tails and samplers.

Two concrete models are provided.  ``WeibullType`` has closed forms for
everything.  ``MG1Pareto`` (``X = V - T`` with Pareto service ``V`` and
exponential interarrival ``T``) has no closed-form tail; all of its tail
quantities reduce to

    psi_alpha(y) = E[(1 + y + T)^(-alpha)],   y >= 0,

which is tabulated once by vector quadrature on a uniform grid in
``u = log(1 + y)`` and evaluated by cubic Hermite interpolation of
``log psi_alpha`` (exact derivatives are available from ``psi_{alpha+1}``).
Beyond the grid an asymptotic series in ``1 / (rate (1 + y))`` is used.

Every scalar routine is an ``njit`` kernel taking ``(kind, par, tab)`` so the
simulation engine can call it without Python overhead; the model classes are
thin immutable wrappers.
"""

from __future__ import annotations

import enum
import math
from typing import Any

import numba as nb
import numpy as np
from scipy import integrate

WEIBULL = 0
MG1 = 1

TOL_INV = 1e-10
TOL_G = 1e-10
# Masses are carried in log space, so only the mass relative to P(X > lo)
# limits resolvability: below this the conditional inverse loses all digits.
REL_MASS_FLOOR = 1e-8

_LOG_REL_MASS_FLOOR = math.log(REL_MASS_FLOOR)
_LOG_HALF = math.log(0.5)

# slots of the MG1 parameter vector
_IOTA, _RATE, _LOG1M_PSI0, _G0, _DU, _UMAX, _NGRID = range(7)
_N_ALPHA = 5  # psi for alpha = iota - 1 + j, j = 0..4

OK = 0
DEGENERATE = 1


class DegenerateIntervalError(ValueError):
    """Conditional mass of a sampling interval is too small to resolve."""


class TailClass(enum.Enum):
    REGULARLY_VARYING = "regularly_varying"
    CONCAVE_HAZARD = "concave_hazard"


# ---------------------------------------------------------------------------
# njit kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True, inline='always')
def _series_logpsi(alpha, rate, y):
    z = 1.0 / (rate * (1.0 + y))
    term = 1.0
    s = 1.0
    for n in range(1, 7):
        term *= -(alpha + n - 1.0) * z
        s += term
    return -alpha * math.log1p(y) + math.log(s)


@nb.njit(cache=True)
def _series_dlogpsi_du(alpha, rate, y):
    z = 1.0 / (rate * (1.0 + y))
    term = 1.0
    s = 1.0
    ds = 0.0
    for n in range(1, 7):
        term *= -(alpha + n - 1.0) * z
        s += term
        ds += n * term
    # dz/du = -z, so d log s / du = -(sum n c_n z^n) / s
    return -alpha - ds / s


@nb.njit(cache=True, inline='always')
def _hermite(tab, j, i, t, du):
    y0 = tab[j, i]
    y1 = tab[j, i + 1]
    m0 = tab[_N_ALPHA + j, i] * du
    m1 = tab[_N_ALPHA + j, i + 1] * du
    t2 = t * t
    t3 = t2 * t
    return ((2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * m1)


@nb.njit(cache=True)
def _hermite_dt(tab, j, i, t, du):
    y0 = tab[j, i]
    y1 = tab[j, i + 1]
    m0 = tab[_N_ALPHA + j, i] * du
    m1 = tab[_N_ALPHA + j, i + 1] * du
    t2 = t * t
    return ((6.0 * t2 - 6.0 * t) * y0 + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1 + (3.0 * t2 - 2.0 * t) * m1)


@nb.njit(cache=True, inline='always')
def _logpsi(par, tab, j, y):
    u = math.log1p(y)
    if u >= par[_UMAX]:
        return _series_logpsi(par[_IOTA] - 1.0 + j, par[_RATE], y)
    du = par[_DU]
    n = int(par[_NGRID])
    i = int(u / du)
    if i > n - 2:
        i = n - 2
    return _hermite(tab, j, i, u / du - i, du)


@nb.njit(cache=True, inline='always')
def log_sf(kind, par, tab, x):
    """log P(X > x)."""
    if kind == WEIBULL:
        if x <= -1.0:
            return 0.0
        return -2.0 * math.sqrt(x + 1.0)
    if x >= 0.0:
        return _logpsi(par, tab, 1, x)
    if x == -np.inf:
        return 0.0
    return math.log1p(-math.exp(par[_RATE] * x + par[_LOG1M_PSI0]))


@nb.njit(cache=True)
def log_cdf(kind, par, tab, x):
    """log P(X <= x)."""
    if kind == WEIBULL:
        if x <= -1.0:
            return -np.inf
        return math.log(-math.expm1(-2.0 * math.sqrt(x + 1.0)))
    if x < 0.0:
        return par[_RATE] * x + par[_LOG1M_PSI0]
    return math.log1p(-math.exp(_logpsi(par, tab, 1, x)))


@nb.njit(cache=True, inline='always')
def log_pdf(kind, par, tab, x):
    if kind == WEIBULL:
        if x < -1.0:
            return -np.inf
        if x == -1.0:
            return np.inf
        z = math.sqrt(x + 1.0)
        return -math.log(z) - 2.0 * z
    if x >= 0.0:
        return math.log(par[_IOTA]) + _logpsi(par, tab, 2, x)
    return math.log(par[_RATE]) + par[_RATE] * x + par[_LOG1M_PSI0]


@nb.njit(cache=True)
def log_integrated_tail(kind, par, tab, x):
    """log G(x), G(x) = int_x^inf P(X > s) ds."""
    if kind == WEIBULL:
        if x < -1.0:
            return math.log(-0.5 - x)
        z = math.sqrt(x + 1.0)
        return math.log(z + 0.5) - 2.0 * z
    if x >= 0.0:
        return _logpsi(par, tab, 0, x) - math.log(par[_IOTA] - 1.0)
    rate = par[_RATE]
    g = par[_G0] - x + math.exp(par[_LOG1M_PSI0]) * math.expm1(rate * x) / rate
    return math.log(g)


@nb.njit(cache=True, inline='always')
def log_sf_and_integrated_tail(kind, par, tab, x):
    """(log P(X > x), log G(x)) sharing one table lookup; x >= 0 for MG1."""
    if kind == WEIBULL:
        if x <= -1.0:
            return 0.0, math.log(-0.5 - x)
        z = math.sqrt(x + 1.0)
        return -2.0 * z, math.log(z + 0.5) - 2.0 * z
    if x < 0.0:
        return log_sf(kind, par, tab, x), log_integrated_tail(kind, par, tab, x)
    u = math.log1p(x)
    if u >= par[_UMAX]:
        iota = par[_IOTA]
        return (_series_logpsi(iota, par[_RATE], x),
                _series_logpsi(iota - 1.0, par[_RATE], x) - math.log(iota - 1.0))
    du = par[_DU]
    n = int(par[_NGRID])
    i = int(u / du)
    if i > n - 2:
        i = n - 2
    t = u / du - i
    return _hermite(tab, 1, i, t, du), _hermite(tab, 0, i, t, du) - math.log(par[_IOTA] - 1.0)


@nb.njit(cache=True, inline='always')
def log_cdf_given_sf(kind, par, tab, x, lsf):
    """log P(X <= x) reusing an already computed log P(X > x)."""
    if kind == MG1 and x < 0.0:
        return par[_RATE] * x + par[_LOG1M_PSI0]
    return math.log1p(-math.exp(lsf))


@nb.njit(cache=True)
def _mg1_inverse_table(par, tab, y):
    # solve log psi_iota(x) = -y for x >= 0
    target = -y
    n = int(par[_NGRID])
    du = par[_DU]
    if target < tab[1, n - 1]:
        alpha = par[_IOTA]
        rate = par[_RATE]
        lo = par[_UMAX]
        hi = lo + 2.0 * (tab[1, n - 1] - target) / alpha + 1.0
        while _series_logpsi(alpha, rate, math.expm1(hi)) > target:
            hi = 2.0 * hi
        u = 0.5 * (lo + hi)
        for _ in range(200):
            fu = _series_logpsi(alpha, rate, math.expm1(u)) - target
            if fu > 0.0:
                lo = u
            else:
                hi = u
            step = fu / _series_dlogpsi_du(alpha, rate, math.expm1(u))
            un = u - step
            if un <= lo or un >= hi:
                un = 0.5 * (lo + hi)
            if abs(un - u) <= 1e-15 * max(1.0, abs(u)):
                u = un
                break
            u = un
        return math.expm1(u)
    # bisect for tab[1, i] >= target > tab[1, i + 1] (the row is decreasing)
    i = 0
    j = n - 1
    while j - i > 1:
        mid = (i + j) >> 1
        if tab[1, mid] >= target:
            i = mid
        else:
            j = mid
    lo = 0.0
    hi = 1.0
    t = 0.5
    if tab[1, i] != tab[1, i + 1]:
        t = (tab[1, i] - target) / (tab[1, i] - tab[1, i + 1])
    for _ in range(60):
        ft = _hermite(tab, 1, i, t, du) - target
        if ft == 0.0:
            break
        if ft > 0.0:
            lo = t
        else:
            hi = t
        dt = _hermite_dt(tab, 1, i, t, du)
        tn = t - ft / dt if dt != 0.0 else 0.5 * (lo + hi)
        if tn <= lo or tn >= hi:
            tn = 0.5 * (lo + hi)
        if abs(tn - t) <= 1e-14:
            t = tn
            break
        t = tn
    return math.expm1((i + t) * du)


@nb.njit(cache=True)
def inverse_cumulative_hazard(kind, par, tab, y):
    """x with -log P(X > x) = y, for y >= 0."""
    if kind == WEIBULL:
        return 0.25 * y * y - 1.0
    lam0 = -tab[1, 0]
    if y <= lam0:
        if y <= 0.0:
            return -np.inf
        return (math.log(-math.expm1(-y)) - par[_LOG1M_PSI0]) / par[_RATE]
    return _mg1_inverse_table(par, tab, y)


@nb.njit(cache=True)
def inverse_log_cdf(kind, par, tab, lf):
    """x with log P(X <= x) = lf."""
    if kind == MG1 and lf <= par[_LOG1M_PSI0]:
        return (lf - par[_LOG1M_PSI0]) / par[_RATE]
    if lf >= 0.0:
        return np.inf
    return inverse_cumulative_hazard(kind, par, tab, -math.log1p(-math.exp(lf)))


@nb.njit(cache=True)
def log_interval_mass(kind, par, tab, lo, hi):
    """log P(lo < X <= hi)."""
    if hi <= lo:
        return -np.inf
    if hi == np.inf:
        return log_sf(kind, par, tab, lo)
    if lo == -np.inf:
        return log_cdf(kind, par, tab, hi)
    s_lo = log_sf(kind, par, tab, lo)
    if s_lo < _LOG_HALF:
        s_hi = log_sf(kind, par, tab, hi)
        return s_lo + math.log1p(-math.exp(s_hi - s_lo))
    c_hi = log_cdf(kind, par, tab, hi)
    c_lo = log_cdf(kind, par, tab, lo)
    return c_hi + math.log1p(-math.exp(c_lo - c_hi))


@nb.njit(cache=True, inline='always')
def sample_nominal(kind, par, tab, rng):
    if kind == WEIBULL:
        e = rng.standard_exponential()
        return 0.25 * e * e - 1.0
    v = (1.0 - rng.random()) ** (-1.0 / par[_IOTA]) - 1.0
    return v - rng.standard_exponential() / par[_RATE]


@nb.njit(cache=True)
def _mg1_sample_tail(par, lo, rng):
    # exact: T | X > lo has density prop. to f_T(t) P(V > lo + t); then V | V > lo + T
    iota = par[_IOTA]
    rate = par[_RATE]
    while True:
        t = rng.standard_exponential() / rate
        c = lo + t
        if lo > 0.0:
            if rng.random() >= ((1.0 + lo) / (1.0 + c)) ** iota:
                continue
        elif c > 0.0:
            if rng.random() >= (1.0 + c) ** (-iota):
                continue
        base = 1.0 + max(c, 0.0)
        v = base * (1.0 - rng.random()) ** (-1.0 / iota) - 1.0
        return v - t


@nb.njit(cache=True)
def _clamp_open_closed(x, lo, hi):
    if x > hi:
        return hi
    if x <= lo:
        return np.nextafter(lo, np.inf)
    return x


@nb.njit(cache=True)
def sample_interval(kind, par, tab, lo, hi, rng):
    """Draw X ~ f restricted to (lo, hi].  Returns (x, status)."""
    if lo == -np.inf and hi == np.inf:
        return sample_nominal(kind, par, tab, rng), OK
    lm = log_interval_mass(kind, par, tab, lo, hi)
    s_lo = log_sf(kind, par, tab, lo)
    if not lm - s_lo >= _LOG_REL_MASS_FLOOR or lm == -np.inf:
        return np.nan, DEGENERATE
    if kind == WEIBULL:
        base = 0.0 if lo <= -1.0 else 2.0 * math.sqrt(lo + 1.0)
        if hi == np.inf:
            e = rng.standard_exponential()
        else:
            width = 2.0 * math.sqrt(hi + 1.0) - base
            e = -math.log1p(rng.random() * math.expm1(-width))
        x = inverse_cumulative_hazard(kind, par, tab, base + e)
        return _clamp_open_closed(x, lo, hi), OK
    if lo == -np.inf:
        if lm >= _LOG_HALF:
            while True:
                x = sample_nominal(kind, par, tab, rng)
                if x <= hi:
                    return x, OK
        x = inverse_log_cdf(kind, par, tab, lm + math.log(1.0 - rng.random()))
        return _clamp_open_closed(x, lo, hi), OK
    if lm - s_lo >= _LOG_HALF:
        while True:
            x = _mg1_sample_tail(par, lo, rng)
            if x <= hi:
                return x, OK
    u = rng.random()
    if s_lo < _LOG_HALF:
        target = s_lo + math.log1p(-u * math.exp(lm - s_lo))
        x = inverse_cumulative_hazard(kind, par, tab, -target)
    else:
        c_lo = log_cdf(kind, par, tab, lo)
        a = max(c_lo, math.log(u) + lm)
        lf = a + math.log(math.exp(c_lo - a) + math.exp(math.log(u) + lm - a))
        x = inverse_log_cdf(kind, par, tab, lf)
    return _clamp_open_closed(x, lo, hi), OK


@nb.njit(cache=True)
def _map_kernel(which, kind, par, tab, xs):
    out = np.empty(xs.size)
    flat = xs.ravel()
    for i in range(flat.size):
        x = flat[i]
        if which == 0:
            out[i] = log_sf(kind, par, tab, x)
        elif which == 1:
            out[i] = log_cdf(kind, par, tab, x)
        elif which == 2:
            out[i] = log_pdf(kind, par, tab, x)
        elif which == 3:
            out[i] = log_integrated_tail(kind, par, tab, x)
        else:
            out[i] = inverse_cumulative_hazard(kind, par, tab, x)
    return out


@nb.njit(cache=True)
def _sample_many(kind, par, tab, rng, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = sample_nominal(kind, par, tab, rng)
    return out


# ---------------------------------------------------------------------------
# model classes
# ---------------------------------------------------------------------------


class IncrementModel:
    """Immutable increment law with a numba-facing ``(kind, par, tab)`` view."""

    name: str
    kind: int
    mean_drift: float
    variance: float
    tail_class: TailClass
    tail_index: float
    b0: float
    support_min: float

    _par: np.ndarray
    _tab: np.ndarray

    @property
    def kernel(self) -> tuple[int, np.ndarray, np.ndarray]:
        return self.kind, self._par, self._tab

    def _apply(self, which: int, x):
        arr = np.asarray(x, dtype=float)
        out = _map_kernel(which, self.kind, self._par, self._tab, np.ascontiguousarray(arr))
        return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)

    def log_sf(self, x):
        return self._apply(0, x)

    def sf(self, x):
        return np.exp(self.log_sf(x))

    def log_cdf(self, x):
        return self._apply(1, x)

    def cdf(self, x):
        return np.exp(self.log_cdf(x))

    def log_pdf(self, x):
        return self._apply(2, x)

    def pdf(self, x):
        return np.exp(self.log_pdf(x))

    def log_integrated_tail(self, x):
        return self._apply(3, x)

    def integrated_tail(self, x):
        return np.exp(self.log_integrated_tail(x))

    def cumulative_hazard(self, x):
        return -self.log_sf(x)

    def hazard(self, x):
        return np.exp(self.log_pdf(x) - self.log_sf(x))

    def inverse_cumulative_hazard(self, y):
        return self._apply(4, y)

    def log_interval_mass(self, lo: float, hi: float) -> float:
        return log_interval_mass(self.kind, self._par, self._tab, float(lo), float(hi))

    def mean_excess_scale(self, b: float) -> float:
        """a(b) = G(b) / P(X > b), formed in log space."""
        return math.exp(self.log_integrated_tail(b) - self.log_sf(b))

    def sample_nominal(self, rng: np.random.Generator, size: int | None = None):
        if size is None:
            return sample_nominal(self.kind, self._par, self._tab, rng)
        return _sample_many(self.kind, self._par, self._tab, rng, int(size))

    def sample_conditional_interval(self, lo: float, hi: float, rng: np.random.Generator) -> float:
        if not lo < hi:
            raise ValueError(f"empty interval ({lo}, {hi}]")
        x, status = sample_interval(self.kind, self._par, self._tab, float(lo), float(hi), rng)
        if status == DEGENERATE:
            raise DegenerateIntervalError(
                f"interval ({lo}, {hi}] has conditional mass below the resolvable floor"
            )
        return x

    def to_config(self) -> dict[str, Any]:
        raise NotImplementedError

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.to_config().items() if k != "name")
        return f"{type(self).__name__}({args})"


class WeibullType(IncrementModel):
    """P(X > t) = exp(-2 sqrt(t + 1)) on t >= -1.

    Lambda(t) = 2 sqrt(t + 1), G(x) = (sqrt(x + 1) + 1/2) exp(-2 sqrt(x + 1)),
    E X = -1/2, Var X = 5/4, beta0 = 1/2.
    """

    name = "weibull_type"
    kind = WEIBULL

    def __init__(self, b0: float = 0.0):
        self.b0 = float(b0)
        self.mean_drift = -0.5
        self.variance = 1.25
        self.tail_class = TailClass.CONCAVE_HAZARD
        self.tail_index = 0.5
        self.support_min = -1.0
        self._par = np.zeros(1)
        self._tab = np.zeros((1, 1))

    def to_config(self) -> dict[str, Any]:
        return {"name": self.name, "b0": self.b0}


def _psi_table(iota: float, rate: float, du: float, u_max: float):
    """log psi_alpha and d log psi_alpha / du on the grid, alpha = iota - 1 + j."""
    u = np.arange(0.0, u_max + 0.5 * du, du)
    w = np.exp(u)  # 1 + y
    alphas = iota - 1.0 + np.arange(_N_ALPHA + 1)

    def integrand(t):
        # normalised so every component is O(1): E[(1 + T / (1 + y))^(-alpha)]
        return rate * np.exp(-rate * t) * (1.0 + t / w[None, :]) ** (-alphas[:, None])

    vals, err = integrate.quad_vec(
        integrand, 0.0, np.inf, epsabs=1e-15, epsrel=1e-14, norm="max", limit=4000
    )
    if not err < 1e-12:
        raise RuntimeError(f"tail table quadrature did not converge (error {err:.3g})")
    log_psi = np.log(vals) - alphas[:, None] * u[None, :]
    # d/du log psi_a = -a (1+y) psi_{a+1} / psi_a = -a vals_{a+1} / vals_a
    dlog = -alphas[:-1, None] * vals[1:] / vals[:-1]
    tab = np.vstack([log_psi[:-1], dlog])
    return u, np.ascontiguousarray(tab)


class MG1Pareto(IncrementModel):
    """X = V - T, P(V > v) = (1 + v)^(-iota_V), T exponential with the given mean.

    The service index is the regular-variation index of X.  With the default
    arguments E X = -2/3 and the traffic intensity is 1/2.
    """

    name = "mg1_pareto"
    kind = MG1

    GRID_DU = 0.005
    GRID_Y_MAX = 1e6

    def __init__(self, service_index: float = 2.5, interarrival_mean: float = 4.0 / 3.0,
                 b0: float = 0.0):
        iota = float(service_index)
        if not iota > 1.0:
            raise ValueError("service_index must exceed 1 for a finite mean")
        mean_v = 1.0 / (iota - 1.0)
        if not mean_v < interarrival_mean:
            raise ValueError("the walk needs negative drift: E V < E T")
        self.service_index = iota
        self.interarrival_mean = float(interarrival_mean)
        self.arrival_rate = 1.0 / self.interarrival_mean
        self.traffic_intensity = mean_v * self.arrival_rate
        self.mean_drift = mean_v - self.interarrival_mean
        var_v = 2.0 / ((iota - 1.0) * (iota - 2.0)) - mean_v**2 if iota > 2.0 else math.inf
        self.variance = var_v + self.interarrival_mean**2
        self.tail_class = TailClass.REGULARLY_VARYING
        self.tail_index = iota
        self.b0 = float(b0)
        self.support_min = -math.inf

        du = self.GRID_DU
        u_max = du * math.ceil(math.log1p(self.GRID_Y_MAX) / du)
        u, tab = _psi_table(iota, self.arrival_rate, du, u_max)
        psi0 = math.exp(tab[1, 0])
        g0 = math.exp(tab[0, 0]) / (iota - 1.0)
        self._par = np.array([iota, self.arrival_rate, math.log1p(-psi0), g0, du, u[-1], u.size],
                             dtype=float)
        self._tab = tab

    def to_config(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "service_index": self.service_index,
            "interarrival_mean": self.interarrival_mean,
            "b0": self.b0,
        }


MODELS = {WeibullType.name: WeibullType, MG1Pareto.name: MG1Pareto}


def model_from_config(spec: dict[str, Any]) -> IncrementModel:
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(MODELS)}")
    return MODELS[name](**spec)


# module-level operations -----------------------------------------------------


def cumulative_hazard(model: IncrementModel, x: float) -> float:
    if x < model.support_min:
        raise ValueError(f"x={x} is below the support of {model.name}")
    ls = model.log_sf(x)
    if ls == -math.inf:
        raise ValueError(f"P(X > {x}) underflows to 0")
    return -ls


def inverse_cumulative_hazard_of(model: IncrementModel, y: float) -> float:
    if y < 0:
        raise ValueError("cumulative hazard values are non-negative")
    return model.inverse_cumulative_hazard(y)


def integrated_tail(model: IncrementModel, x: float) -> float:
    return model.integrated_tail(x)


def mean_excess_scale(model: IncrementModel, b: float) -> float:
    if model.log_sf(b) == -math.inf:
        raise ValueError(f"P(X > {b}) underflows; a(b) undefined")
    return model.mean_excess_scale(b)
