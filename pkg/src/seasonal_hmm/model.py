"""Parametric family of the seasonal hidden Markov weather model.

Hidden states follow a Markov chain whose transition matrices are softmax
transforms of trigonometric polynomials in the day index. Given state ``k`` the
observation (precipitation, temperature) is a mixture of ``M`` tensor-product
components: the first ``M1`` put a point mass on zero precipitation, the others
draw precipitation from an exponential law whose scale follows a seasonal
curve. Temperature is Gaussian around a state trend plus a seasonal cycle.

The scalar functions in this module (``transition_matrix``,
``emission_log_density``, ``exact_log_likelihood``) use plain ``math`` and are
kept deliberately simple so that they can act as references for the vectorised
machinery in :mod:`seasonal_hmm.inference`.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_PERIOD = 365


class InvalidParameterError(ValueError):
    """Parameters violate the model's structural constraints."""


class InvalidObservationError(ValueError):
    """An observation lies outside the observation space."""


class OracleBoundError(ValueError):
    """The brute-force likelihood was requested on too large an instance."""


class TrendKind(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    PIECEWISE = "piecewise"


@dataclass(frozen=True)
class TrendForm:
    kind: TrendKind = TrendKind.LINEAR
    breakpoint: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TrendKind(self.kind))
        if self.kind is TrendKind.PIECEWISE and self.breakpoint is None:
            raise InvalidParameterError("piecewise trend needs a breakpoint year")
        if self.kind is not TrendKind.PIECEWISE and self.breakpoint is not None:
            raise InvalidParameterError("only a piecewise trend takes a breakpoint")

    @classmethod
    def constant(cls) -> "TrendForm":
        return cls(TrendKind.CONSTANT)

    @classmethod
    def linear(cls) -> "TrendForm":
        return cls(TrendKind.LINEAR)

    @classmethod
    def piecewise(cls, breakpoint: float) -> "TrendForm":
        return cls(TrendKind.PIECEWISE, float(breakpoint))

    @property
    def n_coeffs(self) -> int:
        return {TrendKind.CONSTANT: 1, TrendKind.LINEAR: 2, TrendKind.PIECEWISE: 3}[self.kind]

    def __str__(self) -> str:
        if self.kind is TrendKind.PIECEWISE:
            return f"piecewise({self.breakpoint:g})"
        return self.kind.value


@dataclass(frozen=True)
class Calendar:
    """Maps the 1-based day index to calendar years.

    Every year has exactly ``period`` days (Feb 29 is dropped upstream), so
    day ``t`` falls in year ``first_year + (t - 1) // period``. Trends use the
    fractional year ``first_year + (t - 1) / period``, which equals the
    calendar year on each January 1st.
    """

    first_year: int = 2000
    period: int = DEFAULT_PERIOD

    def year(self, t):
        return self.first_year + (np.asarray(t, dtype=float) - 1.0) / self.period

    def day_of_year(self, t):
        return (np.asarray(t) - 1) % self.period + 1


@dataclass(frozen=True)
class ModelSpec:
    K: int
    M: int
    M1: int
    d: int
    T: int = DEFAULT_PERIOD
    trend_form: TrendForm = field(default_factory=TrendForm.linear)

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.d < 0 or self.T < 1:
            raise InvalidParameterError(f"invalid hyper-parameters {self}")
        if not 0 <= self.M1 < self.M:
            raise InvalidParameterError("need 0 <= M1 < M (at least one exponential component)")

    @property
    def D(self) -> int:
        """Number of coefficients of a degree-d trigonometric polynomial."""
        return 2 * self.d + 1

    @property
    def n_wet(self) -> int:
        return self.M - self.M1

    def check_calendar(self, calendar: Calendar, n_days: int) -> None:
        if self.trend_form.kind is TrendKind.PIECEWISE:
            last = calendar.first_year + (n_days - 1) // calendar.period
            tau = self.trend_form.breakpoint
            if not calendar.first_year < tau < last:
                raise InvalidParameterError(
                    f"breakpoint {tau:g} not strictly inside data years "
                    f"{calendar.first_year}-{last}")

    def with_K(self, K: int) -> "ModelSpec":
        return ModelSpec(K, self.M, self.M1, self.d, self.T, self.trend_form)


@dataclass(frozen=True)
class TransitionParams:
    """``beta[i, j, l]`` for origin ``i``, destination ``j < K`` and harmonic ``l``.

    The last state is the softmax reference: its logit is fixed to zero.
    """

    beta: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        if beta.ndim != 3 or beta.shape[1] != beta.shape[0] - 1 or beta.shape[2] % 2 != 1:
            raise InvalidParameterError(f"beta must have shape K x (K-1) x (2d+1), got {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise InvalidParameterError("beta must be finite")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def zeros(cls, K: int, d: int) -> "TransitionParams":
        return cls(np.zeros((K, K - 1, 2 * d + 1)))


@dataclass(frozen=True)
class StateEmissionParams:
    """Emission parameters of one hidden state.

    ``precip_season_coeffs`` parameterise the log of the precipitation scale:
    ``1 + sigma_k(t) = exp(s_k(t))`` with ``s_k`` a trigonometric polynomial.
    ``lambdas`` holds the ``M - M1`` exponential rate baselines (1/mm).
    ``trend_coeffs`` are (intercept, slope per year, extra slope after the
    breakpoint), truncated to the trend form; the slope is measured from the
    calendar's first year.
    """

    weights: np.ndarray
    lambdas: np.ndarray
    precip_season_coeffs: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    temp_season_coeffs: np.ndarray
    trend_coeffs: np.ndarray

    def __post_init__(self):
        for name in ("weights", "lambdas", "precip_season_coeffs", "means",
                     "variances", "temp_season_coeffs", "trend_coeffs"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        w = self.weights
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParameterError(f"mixture weights must be a probability vector, got {w}")
        if np.any(self.lambdas <= 0):
            raise InvalidParameterError("exponential rates must be positive")
        if np.any(self.variances <= 0):
            raise InvalidParameterError("variances must be positive")
        if self.means.size != w.size or self.variances.size != w.size:
            raise InvalidParameterError("means/variances must have one entry per component")
        if self.precip_season_coeffs.size != self.temp_season_coeffs.size:
            raise InvalidParameterError("seasonal coefficient vectors differ in length")

    @property
    def M(self) -> int:
        return self.weights.size

    @property
    def M1(self) -> int:
        return self.weights.size - self.lambdas.size

    @property
    def dry_weight(self) -> float:
        return float(self.weights[: self.M1].sum())

    def check(self, spec: ModelSpec) -> None:
        if (self.M, self.M1) != (spec.M, spec.M1):
            raise InvalidParameterError(f"emission block has M={self.M}, M1={self.M1}; spec wants {spec.M}, {spec.M1}")
        if self.temp_season_coeffs.size != spec.D:
            raise InvalidParameterError("seasonal coefficients do not match degree d")
        if self.trend_coeffs.size != spec.trend_form.n_coeffs:
            raise InvalidParameterError("trend coefficients do not match trend form")


@dataclass(frozen=True)
class Parameters:
    transitions: TransitionParams
    emissions: tuple
    initial_dist: np.ndarray

    def __post_init__(self):
        pi = np.array(self.initial_dist, dtype=float).ravel()
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise InvalidParameterError("initial distribution must be a probability vector")
        pi.setflags(write=False)
        object.__setattr__(self, "initial_dist", pi)
        object.__setattr__(self, "emissions", tuple(self.emissions))
        if len(self.emissions) != pi.size or self.transitions.beta.shape[0] != pi.size:
            raise InvalidParameterError("state counts disagree between blocks")

    @property
    def K(self) -> int:
        return self.initial_dist.size

    def check(self, spec: ModelSpec) -> None:
        if self.K != spec.K or self.transitions.beta.shape[2] != spec.D:
            raise InvalidParameterError("parameters do not match the model spec")
        for e in self.emissions:
            e.check(spec)

    def stacked(self) -> dict:
        """All per-state arrays stacked along a leading state axis."""
        es = self.emissions
        return {
            "beta": self.transitions.beta,
            "pi": self.initial_dist,
            "weights": np.stack([e.weights for e in es]),
            "lambdas": np.stack([e.lambdas for e in es]),
            "precip_season": np.stack([e.precip_season_coeffs for e in es]),
            "means": np.stack([e.means for e in es]),
            "variances": np.stack([e.variances for e in es]),
            "temp_season": np.stack([e.temp_season_coeffs for e in es]),
            "trend": np.stack([e.trend_coeffs for e in es]),
        }

    @classmethod
    def from_stacked(cls, a: dict) -> "Parameters":
        K = a["pi"].size
        emissions = [
            StateEmissionParams(
                weights=a["weights"][k], lambdas=a["lambdas"][k],
                precip_season_coeffs=a["precip_season"][k], means=a["means"][k],
                variances=a["variances"][k], temp_season_coeffs=a["temp_season"][k],
                trend_coeffs=a["trend"][k])
            for k in range(K)
        ]
        return cls(TransitionParams(a["beta"]), emissions, a["pi"])

    def permuted(self, perm: Sequence[int]) -> "Parameters":
        """Relabel states so that new state ``i`` is old state ``perm[i]``.

        The transition logits are re-expressed against the new reference
        state, which leaves every transition matrix exactly permuted.
        """
        perm = list(perm)
        K = self.K
        beta = self.transitions.beta
        full = np.concatenate([beta, np.zeros((K, 1, beta.shape[2]))], axis=1)
        full = full[perm][:, perm]
        full = full - full[:, -1:, :]
        a = self.stacked()
        out = {key: val[perm] for key, val in a.items() if key not in ("beta",)}
        out["beta"] = full[:, :-1, :]
        return Parameters.from_stacked(out)


@dataclass(frozen=True)
class Observation:
    precip: Optional[float]
    temp: Optional[float]
    t: int
    day_of_year: int

    def __post_init__(self):
        if self.precip is not None and not math.isnan(self.precip) and self.precip < 0:
            raise InvalidObservationError(f"negative precipitation {self.precip} on day {self.t}")


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


# ---------------------------------------------------------------------------
# scalar evaluation


def _phase(t: int, T: int) -> int:
    return (int(t) - 1) % T + 1


def seasonal_value(coeffs: Sequence[float], t: int, spec: ModelSpec) -> float:
    """Evaluate ``c0 + sum_l c_{2l-1} cos(2 pi l t / T) + c_{2l} sin(2 pi l t / T)``."""
    coeffs = list(coeffs)
    if len(coeffs) != spec.D:
        raise InvalidParameterError(f"expected {spec.D} coefficients, got {len(coeffs)}")
    u = _phase(t, spec.T)
    value = coeffs[0]
    for l in range(1, spec.d + 1):
        angle = 2.0 * math.pi * l * u / spec.T
        value += coeffs[2 * l - 1] * math.cos(angle) + coeffs[2 * l] * math.sin(angle)
    return value


def trend_value(trend_coeffs: Sequence[float], t: int, trend_form: TrendForm,
                calendar: Calendar) -> float:
    y = float(calendar.year(t))
    c = list(trend_coeffs)
    if len(c) != trend_form.n_coeffs:
        raise InvalidParameterError("trend coefficients do not match trend form")
    value = c[0]
    if trend_form.kind is not TrendKind.CONSTANT:
        value += c[1] * (y - calendar.first_year)
    if trend_form.kind is TrendKind.PIECEWISE:
        value += c[2] * max(y - trend_form.breakpoint, 0.0)
    return value


def transition_matrix(params: TransitionParams, t: int, spec: ModelSpec) -> np.ndarray:
    if t < 1:
        raise InvalidParameterError("day index starts at 1")
    K = params.beta.shape[0]
    Q = np.empty((K, K))
    for i in range(K):
        logits = [seasonal_value(params.beta[i, j], t, spec) for j in range(K - 1)] + [0.0]
        top = max(logits)
        e = [math.exp(v - top) for v in logits]
        s = sum(e)
        Q[i] = [v / s for v in e]
    return Q


def _log_normal_pdf(x: float, mean: float, var: float) -> float:
    return -0.5 * (math.log(2.0 * math.pi * var) + (x - mean) ** 2 / var)


def emission_log_density(state: StateEmissionParams, obs: Observation, spec: ModelSpec,
                         calendar: Calendar) -> float:
    """Log emission density w.r.t. (point mass at 0 + Lebesgue) x Lebesgue.

    A missing coordinate contributes a factor of one.
    """
    precip, temp = obs.precip, obs.temp
    if not _missing(precip) and precip < 0:
        raise InvalidObservationError(f"negative precipitation {precip}")
    t = obs.t
    location = (trend_value(state.trend_coeffs, t, spec.trend_form, calendar)
                + seasonal_value(state.temp_season_coeffs, t, spec))
    log_scale = seasonal_value(state.precip_season_coeffs, t, spec)
    terms = []
    for m in range(state.M):
        p = state.weights[m]
        if p == 0.0:
            continue
        lp = math.log(p)
        if not _missing(precip):
            if m < state.M1:
                if precip > 0:
                    continue
            else:
                if precip == 0:
                    continue
                rate = state.lambdas[m - state.M1] * math.exp(-log_scale)
                lp += math.log(rate) - rate * precip
        if not _missing(temp):
            lp += _log_normal_pdf(temp, location + state.means[m], state.variances[m])
        terms.append(lp)
    if not terms:
        return -math.inf
    top = max(terms)
    return top + math.log(sum(math.exp(v - top) for v in terms))


def exact_log_likelihood(params: Parameters, series, spec: ModelSpec,
                         max_n: int = 12, max_K: int = 3) -> float:
    """Brute-force log-likelihood summing over every hidden path.

    Exponential cost; only for tiny instances used to check forward-backward.
    """
    obs = list(series.observations())
    n = len(obs)
    if n > max_n or spec.K > max_K:
        raise OracleBoundError(f"enumeration refused for n={n}, K={spec.K}")
    K = spec.K
    logf = [[emission_log_density(params.emissions[k], o, spec, series.calendar)
             for k in range(K)] for o in obs]
    logQ = [np.log(transition_matrix(params.transitions, o.t, spec)) for o in obs[:-1]]
    logpi = [math.log(p) if p > 0 else -math.inf for p in params.initial_dist]
    paths = []
    for path in itertools.product(range(K), repeat=n):
        lp = logpi[path[0]] + logf[0][path[0]]
        for s in range(1, n):
            lp += logQ[s - 1][path[s - 1], path[s]] + logf[s][path[s]]
        paths.append(lp)
    top = max(paths)
    if top == -math.inf:
        return -math.inf
    return top + math.log(sum(math.exp(v - top) for v in paths))


# ---------------------------------------------------------------------------
# vectorised evaluation over day indices


def harmonic_design(t, d: int, T: int) -> np.ndarray:
    """Rows ``[1, cos(2pi t/T), sin(2pi t/T), ..., cos(2pi d t/T), sin(2pi d t/T)]``."""
    u = (np.asarray(t, dtype=np.int64) - 1) % T + 1
    out = np.empty((u.size, 2 * d + 1))
    out[:, 0] = 1.0
    for l in range(1, d + 1):
        angle = 2.0 * np.pi * l * u / T
        out[:, 2 * l - 1] = np.cos(angle)
        out[:, 2 * l] = np.sin(angle)
    return out


def trend_design(t, trend_form: TrendForm, calendar: Calendar) -> np.ndarray:
    y = calendar.year(np.asarray(t))
    cols = [np.ones_like(y)]
    if trend_form.kind is not TrendKind.CONSTANT:
        cols.append(y - calendar.first_year)
    if trend_form.kind is TrendKind.PIECEWISE:
        cols.append(np.maximum(y - trend_form.breakpoint, 0.0))
    return np.column_stack(cols)


def transition_matrices(beta: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Transition matrices for each row of a harmonic design ``H`` -> (n, K, K)."""
    logits = np.einsum("ijl,nl->nij", beta, H)
    n, K = H.shape[0], beta.shape[0]
    full = np.concatenate([logits, np.zeros((n, K, 1))], axis=2)
    full -= full.max(axis=2, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=2, keepdims=True)


def period_transitions(params: Parameters, spec: ModelSpec) -> np.ndarray:
    """``Q(u)`` for ``u = 1..T`` stacked as (T, K, K); ``Q(t) = Q[(t-1) % T]``."""
    H = harmonic_design(np.arange(1, spec.T + 1), spec.d, spec.T)
    return transition_matrices(params.transitions.beta, H)


@dataclass(frozen=True)
class Design:
    """Per-day quantities that stay fixed while parameters change."""

    H: np.ndarray        # harmonic design (n, D)
    X: np.ndarray        # trend design (n, n_trend)
    phase: np.ndarray    # (t - 1) % T, 0-based
    precip: np.ndarray   # NaN where missing
    temp: np.ndarray
    wet: np.ndarray      # precip observed and > 0
    dry: np.ndarray      # precip observed and == 0
    t_obs: np.ndarray    # temperature observed

    @classmethod
    def build(cls, spec: ModelSpec, precip, temp, t, calendar: Calendar) -> "Design":
        precip = np.asarray(precip, dtype=float)
        temp = np.asarray(temp, dtype=float)
        t = np.asarray(t, dtype=np.int64)
        p_obs = ~np.isnan(precip)
        if np.any(precip[p_obs] < 0):
            raise InvalidObservationError("negative precipitation")
        return cls(
            H=harmonic_design(t, spec.d, spec.T),
            X=trend_design(t, spec.trend_form, calendar),
            phase=(t - 1) % spec.T,
            precip=precip, temp=temp,
            wet=p_obs & (precip > 0), dry=p_obs & (precip == 0),
            t_obs=~np.isnan(temp),
        )

    @classmethod
    def for_series(cls, spec: ModelSpec, series) -> "Design":
        return cls.build(spec, series.precip, series.temp, series.t, series.calendar)

    @property
    def n(self) -> int:
        return self.phase.size


def component_log_densities(a: dict, spec: ModelSpec, design: Design) -> np.ndarray:
    """Per-component joint log terms ``log p_km + log f1 + log f2`` -> (n, K, M).

    ``a`` is a stacked parameter dict (see :meth:`Parameters.stacked`).
    """
    g = design
    n, K, M, M1 = g.n, spec.K, spec.M, spec.M1
    with np.errstate(divide="ignore"):
        out = np.broadcast_to(np.log(a["weights"])[None], (n, K, M)).copy()

    log_scale = g.H @ a["precip_season"].T  # (n, K)
    log_rate = np.log(a["lambdas"])[None, :, :] - log_scale[:, :, None]
    y1 = np.where(g.wet, g.precip, 0.0)
    wet_terms = log_rate - np.exp(log_rate) * y1[:, None, None]
    out[:, :, M1:] += np.where(g.wet[:, None, None], wet_terms, 0.0)
    out[g.dry, :, M1:] = -np.inf
    out[g.wet, :, :M1] = -np.inf

    loc = g.X @ a["trend"].T + g.H @ a["temp_season"].T  # (n, K)
    var = a["variances"][None]
    y2 = np.where(g.t_obs, g.temp, 0.0)
    resid = y2[:, None, None] - loc[:, :, None] - a["means"][None]
    gauss = -0.5 * (np.log(2.0 * np.pi * var) + resid ** 2 / var)
    out += np.where(g.t_obs[:, None, None], gauss, 0.0)
    return out
