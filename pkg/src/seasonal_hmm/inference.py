"""Maximum-likelihood estimation by EM, plus BIC-based choice of the state count.

E-step: scaled forward-backward on emission densities normalised by their
per-day maximum, so nothing underflows however long the series is.

M-step, block by block, each block maximised exactly given the others:

* initial distribution and mixture weights: closed-form ratios;
* exponential rates: closed form given the seasonal precipitation scale, whose
  harmonic coefficients maximise the (concave) profiled objective by Newton's
  method;
* temperature means, trend and seasonal coefficients: weighted least squares
  given the variances, then closed-form variances (floored);
* transition logits: one concave multinomial-logit problem per origin state,
  solved by Newton's method on counts aggregated by day of year.

Each block's update can only increase the expected complete-data
log-likelihood, so the observed log-likelihood never decreases.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from scipy.special import logsumexp

from .model import (
    Calendar,
    Design,
    InvalidParameterError,
    ModelSpec,
    Parameters,
    TrendKind,
    component_log_densities,
    period_transitions,
)

log = logging.getLogger(__name__)


class DegenerateLikelihoodError(ArithmeticError):
    """Some observation has zero density under every state."""

    def __init__(self, t: int, msg: str = ""):
        self.t = t
        super().__init__(msg or f"observation at day {t} is impossible under every state")


class FitFailureError(RuntimeError):
    def __init__(self, msg: str, diagnostics: list):
        self.diagnostics = diagnostics
        super().__init__(msg)


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class EMConfig:
    max_iters: int = 500
    rel_tol: float = 1e-6
    n_restarts: int = 20
    rng_seed: int = 0
    mstep_max_evals: int = 100
    variance_floor: float = 1e-4
    threads: int = 1

    def __post_init__(self):
        if self.max_iters < 1 or self.rel_tol <= 0 or self.n_restarts < 1:
            raise ValueError(f"invalid EM configuration {self}")


@dataclass
class Posteriors:
    gamma: np.ndarray  # (n, K)
    xi: Optional[np.ndarray]  # (n - 1, K, K)


@dataclass
class FittedModel:
    spec: ModelSpec
    params: Parameters
    loglik: float
    bic: float
    n_params: int
    iterations: int
    restart_logliks: list
    converged: bool
    calendar: Calendar = field(default_factory=Calendar)
    n_obs: int = 0
    loglik_trace: list = field(default_factory=list)
    restart_diagnostics: list = field(default_factory=list)
    data_fingerprint: str = ""


# ---------------------------------------------------------------------------
# forward-backward


@numba.njit(cache=True)
def _fb_kernel(b, Q, pi, want_xi):
    n, K = b.shape
    T = Q.shape[0]
    alpha = np.empty((n, K))
    scale = np.empty(n)
    for k in range(K):
        alpha[0, k] = pi[k] * b[0, k]
    s = alpha[0].sum()
    if not s > 0:
        return -1, alpha, alpha, np.empty((0, K, K)), np.empty((T, K, K)), scale
    alpha[0] /= s
    scale[0] = s
    for t in range(1, n):
        q = Q[(t - 1) % T]
        s = 0.0
        for j in range(K):
            acc = 0.0
            for i in range(K):
                acc += alpha[t - 1, i] * q[i, j]
            acc *= b[t, j]
            alpha[t, j] = acc
            s += acc
        if not s > 0:
            return t, alpha, alpha, np.empty((0, K, K)), np.empty((T, K, K)), scale
        for j in range(K):
            alpha[t, j] /= s
        scale[t] = s

    beta = np.empty((n, K))
    beta[n - 1] = 1.0
    counts = np.zeros((T, K, K))
    xi = np.empty((n - 1 if want_xi else 0, K, K))
    tmp = np.empty(K)
    for t in range(n - 2, -1, -1):
        q = Q[t % T]
        for j in range(K):
            tmp[j] = b[t + 1, j] * beta[t + 1, j] / scale[t + 1]
        for i in range(K):
            acc = 0.0
            for j in range(K):
                x = alpha[t, i] * q[i, j] * tmp[j]
                counts[t % T, i, j] += x
                if want_xi:
                    xi[t, i, j] = x
                acc += q[i, j] * tmp[j]
            beta[t, i] = acc
    gamma = alpha * beta
    for t in range(n):
        gamma[t] /= gamma[t].sum()
    return n, alpha, gamma, xi, counts, scale


def _forward_backward_logf(logf: np.ndarray, Q: np.ndarray, pi: np.ndarray, want_xi: bool):
    """Scaled recursions on log emission densities ``logf`` (n, K)."""
    top = logf.max(axis=1)
    bad = np.flatnonzero(~np.isfinite(top))
    if bad.size:
        raise DegenerateLikelihoodError(int(bad[0]) + 1)
    b = np.exp(logf - top[:, None])
    status, _, gamma, xi, counts, scale = _fb_kernel(b, Q, np.ascontiguousarray(pi), want_xi)
    if status != logf.shape[0]:
        raise DegenerateLikelihoodError(status + 1)
    loglik = float(np.log(scale).sum() + top.sum())
    return loglik, gamma, (xi if want_xi else None), counts


def forward_backward(params: Parameters, series, spec: ModelSpec):
    """Log-likelihood and state posteriors of ``series`` under ``params``."""
    if series.n < 1:
        raise ValueError("empty series")
    params.check(spec)
    design = Design.for_series(spec, series)
    comp = component_log_densities(params.stacked(), spec, design)
    logf = logsumexp(comp, axis=2)
    Q = period_transitions(params, spec)
    loglik, gamma, xi, _ = _forward_backward_logf(logf, Q, params.initial_dist, True)
    return loglik, Posteriors(gamma, xi)


# ---------------------------------------------------------------------------
# model size and BIC


def count_parameters(spec: ModelSpec) -> int:
    """Free parameter count.

    ``K(K-1)(2d+1)`` transition coefficients, per state ``(M-1)`` weights,
    ``M-M1`` rates, two seasonal polynomials of ``2d+1`` coefficients, ``M``
    means, ``M`` variances and the trend coefficients, plus ``K-1`` for the
    initial distribution. The constant terms shared between trend, seasonal
    cycle and component means are counted as listed, not netted out.
    """
    K, M, M1, D = spec.K, spec.M, spec.M1, spec.D
    per_state = (M - 1) + (M - M1) + D + M + M + D + spec.trend_form.n_coeffs
    return K * (K - 1) * D + K * per_state + (K - 1)


def bic(loglik: float, n_params: int, n_obs: int) -> float:
    """``-loglik + (n_params / 2) log(n_obs)``; smaller is better."""
    if n_obs < 1:
        raise ValueError("n_obs must be positive")
    return -loglik + 0.5 * n_params * math.log(n_obs)


# ---------------------------------------------------------------------------
# M-step blocks


def _newton_maximise(fun, x0, max_iter: int, gtol: float = 1e-10):
    """Damped Newton ascent for a concave objective.

    ``fun(x)`` returns (value, gradient, hessian). Steps are halved until the
    objective does not decrease, so the returned point is never worse than x0.
    """
    x = x0.copy()
    f, g, h = fun(x)
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= gtol * (1.0 + abs(f)):
            break
        A = -h
        A[np.diag_indices_from(A)] += 1e-12 * (1.0 + np.trace(A) / A.shape[0])
        try:
            step = np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            step = g / (1.0 + np.trace(A))
        t = 1.0
        while t > 1e-10:
            xn = x + t * step
            fn, gn, hn = fun(xn)
            if np.isfinite(fn) and fn >= f:
                break
            t *= 0.5
        else:
            break
        improvement = fn - f
        x, f, g, h = xn, fn, gn, hn
        if improvement <= 1e-15 * (1.0 + abs(f)):
            break
    return x


def _transition_row_objective(n_u: np.ndarray, H: np.ndarray):
    """Concave objective for one origin state's logits.

    ``n_u`` (T, K) expected transition counts by day of year.
    """
    T, K = n_u.shape
    D = H.shape[1]
    N = n_u.sum(axis=1)

    def fun(x):
        B = x.reshape(K - 1, D)
        z = np.concatenate([H @ B.T, np.zeros((T, 1))], axis=1)
        lse = logsumexp(z, axis=1)
        q = np.exp(z - lse[:, None])[:, : K - 1]
        f = float(np.sum(n_u[:, : K - 1] * z[:, : K - 1]) - np.sum(N * lse))
        g = ((n_u[:, : K - 1] - N[:, None] * q).T @ H).ravel()
        W = -N[:, None, None] * (np.einsum("uj,jk->ujk", q, np.eye(K - 1)) - q[:, :, None] * q[:, None, :])
        hess = np.einsum("ujk,ud,ue->jdke", W, H, H).reshape((K - 1) * D, (K - 1) * D)
        return f, g, hess

    return fun


def _update_transitions(beta: np.ndarray, counts: np.ndarray, H_period: np.ndarray,
                        max_iter: int) -> np.ndarray:
    K = beta.shape[0]
    if K == 1:
        return beta
    out = beta.copy()
    for i in range(K):
        n_u = counts[:, i, :]
        if n_u.sum() <= 0:
            continue
        fun = _transition_row_objective(n_u, H_period)
        out[i] = _newton_maximise(fun, beta[i].ravel(), max_iter).reshape(beta[i].shape)
    return out


def _update_precip(a: dict, k: int, w: np.ndarray, g: Design, spec: ModelSpec,
                   max_iter: int) -> None:
    """Rates and seasonal precipitation scale of state ``k`` (in place)."""
    M1 = spec.M1
    ww = w[g.wet, M1:]  # (n_wet, n_comp)
    W = ww.sum(axis=0)
    if not np.any(W > 0):
        return
    y = g.precip[g.wet]
    phase = g.phase[g.wet]
    T = spec.T
    A = np.stack([np.bincount(phase, weights=ww[:, m] * y, minlength=T) for m in range(ww.shape[1])])
    Bw = np.bincount(phase, weights=ww.sum(axis=1), minlength=T)
    Hp = harmonic_period(spec)
    c = a["precip_season"][k].copy()
    live = W > 0

    if spec.d > 0:
        Hh = Hp[:, 1:]

        def fun(x):
            s = c[0] + Hh @ x
            e = np.exp(-s)
            a_mu = A[live] * e[None, :]
            S = a_mu.sum(axis=1)
            f = float(-np.sum(W[live] * np.log(S)) - Bw @ s)
            G = (a_mu @ Hh) / S[:, None]
            grad = W[live] @ G - Bw @ Hh
            hess = np.zeros((Hh.shape[1], Hh.shape[1]))
            for m, wm in enumerate(W[live]):
                hess -= wm * ((Hh * a_mu[m][:, None]).T @ Hh / S[m] - np.outer(G[m], G[m]))
            return f, grad, hess

        c[1:] = _newton_maximise(fun, c[1:], max_iter)
        a["precip_season"][k] = c
    s = Hp @ c
    S = A @ np.exp(-s)
    lam = a["lambdas"][k]
    lam[live] = W[live] / S[live]


def harmonic_period(spec: ModelSpec) -> np.ndarray:
    from .model import harmonic_design

    return harmonic_design(np.arange(1, spec.T + 1), spec.d, spec.T)


def _update_temperature(a: dict, k: int, w: np.ndarray, g: Design, spec: ModelSpec,
                        floor: float) -> None:
    """Weighted least squares for the location terms, then variances (in place).

    The trend intercept and the constant seasonal term are held fixed: they are
    not identifiable separately from the component means.
    """
    obs = g.t_obs
    ww = w[obs]  # (n_obs, M)
    W = ww.sum(axis=0)
    live = W > 1e-12
    if not live.any():
        return
    y = g.temp[obs]
    Xs = g.X[obs][:, 1:]
    Hs = g.H[obs][:, 1:]
    Z = np.concatenate([Xs, Hs], axis=1)
    p = Z.shape[1]
    offset = a["trend"][k][0] + a["temp_season"][k][0]
    ye = y - offset
    var = a["variances"][k]
    V = ww[:, live] / var[live][None, :]
    v = V.sum(axis=1)
    L = int(live.sum())
    A = np.empty((p + L, p + L))
    rhs = np.empty(p + L)
    A[:p, :p] = (Z * v[:, None]).T @ Z
    A[:p, p:] = Z.T @ V
    A[p:, :p] = A[:p, p:].T
    A[p:, p:] = np.diag(V.sum(axis=0))
    rhs[:p] = Z.T @ (v * ye)
    rhs[p:] = V.T @ ye
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    theta, mu = sol[:p], sol[p:]
    nx = Xs.shape[1]
    a["trend"][k][1:] = theta[:nx]
    a["temp_season"][k][1:] = theta[nx:]
    a["means"][k][live] = mu
    fitted = Z @ theta
    resid2 = (ye[:, None] - fitted[:, None] - mu[None, :]) ** 2
    a["variances"][k][live] = np.maximum((ww[:, live] * resid2).sum(axis=0) / W[live], floor)


def _m_step(a: dict, gamma: np.ndarray, counts: np.ndarray, comp: np.ndarray,
            logf: np.ndarray, g: Design, spec: ModelSpec, config: EMConfig) -> dict:
    a = {key: val.copy() for key, val in a.items()}
    K = spec.K
    a["pi"] = gamma[0] / gamma[0].sum()
    resp = np.exp(comp - logf[:, :, None])
    for k in range(K):
        w = gamma[:, k:k + 1] * resp[:, k, :]  # (n, M)
        tot = gamma[:, k].sum()
        if tot <= 0:
            continue
        wsum = w.sum(axis=0)
        a["weights"][k] = wsum / wsum.sum()
        _update_precip(a, k, w, g, spec, config.mstep_max_evals)
        _update_temperature(a, k, w, g, spec, config.variance_floor)
    a["beta"] = _update_transitions(a["beta"], counts, harmonic_period(spec), config.mstep_max_evals)
    return a


# ---------------------------------------------------------------------------
# EM driver


@dataclass
class EMRun:
    params: Parameters
    loglik: float
    trace: list
    iterations: int
    converged: bool


def _stacked_loglik(a: dict, g: Design, spec: ModelSpec, want_xi: bool = False):
    comp = component_log_densities(a, spec, g)
    logf = logsumexp(comp, axis=2)
    Q = transition_period_from_beta(a["beta"], spec)
    ll, gamma, xi, counts = _forward_backward_logf(logf, Q, a["pi"], want_xi)
    return ll, gamma, counts, comp, logf


def transition_period_from_beta(beta: np.ndarray, spec: ModelSpec) -> np.ndarray:
    from .model import transition_matrices

    return transition_matrices(beta, harmonic_period(spec))


def em_run(series, spec: ModelSpec, init: Parameters, config: EMConfig) -> EMRun:
    """One EM ascent from ``init``; the log-likelihood trace is non-decreasing."""
    init.check(spec)
    spec.check_calendar(series.calendar, series.n)
    g = Design.for_series(spec, series)
    a = {key: np.array(val, dtype=float) for key, val in init.stacked().items()}
    trace = []
    converged = False
    it = 0
    while True:
        ll, gamma, counts, comp, logf = _stacked_loglik(a, g, spec)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) / (1.0 + abs(ll)) < config.rel_tol:
            converged = True
            break
        if it >= config.max_iters:
            break
        a = _m_step(a, gamma, counts, comp, logf, g, spec, config)
        it += 1
    return EMRun(Parameters.from_stacked(a), trace[-1], trace, it, converged)


def initial_parameters(series, spec: ModelSpec, rng: np.random.Generator) -> Parameters:
    """Random starting point for one EM restart.

    Temperature is detrended and deseasonalised by ordinary least squares;
    component means sit at random quantiles of the residuals. Rates are the
    reciprocal mean wet-day amount perturbed by up to 30%. Transition logits
    are small Gaussian noise, mixture weights a Dirichlet draw.
    """
    K, M, M1, D = spec.K, spec.M, spec.M1, spec.D
    g = Design.for_series(spec, series)
    obs = g.t_obs
    intercept, slopes, season = 0.0, np.zeros(g.X.shape[1] - 1), np.zeros(D - 1)
    resid = np.array([0.0])
    if obs.sum() > g.X.shape[1] + D:
        Z = np.concatenate([g.X[obs], g.H[obs][:, 1:]], axis=1)
        coef, *_ = np.linalg.lstsq(Z, g.temp[obs], rcond=None)
        intercept, slopes, season = coef[0], coef[1:g.X.shape[1]], coef[g.X.shape[1]:]
        resid = g.temp[obs] - Z @ coef
    rvar = max(float(resid.var()), 1.0) if resid.size > 1 else 1.0
    wet_amounts = g.precip[g.wet]
    base_rate = 1.0 / wet_amounts.mean() if wet_amounts.size else 1.0

    a = {
        "beta": rng.normal(0.0, 0.1, size=(K, K - 1, D)),
        "pi": np.full(K, 1.0 / K),
        "weights": rng.dirichlet(np.full(M, 2.0), size=K),
        "lambdas": base_rate * rng.uniform(0.7, 1.3, size=(K, M - M1)),
        "precip_season": np.zeros((K, D)),
        "means": intercept + np.quantile(resid, rng.uniform(0.05, 0.95, size=(K, M))),
        "variances": rvar * rng.uniform(0.3, 1.0, size=(K, M)),
        "temp_season": np.tile(np.concatenate([[0.0], season]), (K, 1)),
        "trend": np.tile(np.concatenate([[0.0], slopes]), (K, 1)),
    }
    a["weights"] = np.maximum(a["weights"], 1e-3)
    a["weights"] /= a["weights"].sum(axis=1, keepdims=True)
    return Parameters.from_stacked(a)


def _n_informative_days(series) -> int:
    return int(np.sum(~(np.isnan(series.precip) & np.isnan(series.temp))))


def _restart(args):
    series, spec, config, r = args
    rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, r]))
    try:
        init = initial_parameters(series, spec, rng)
        run = em_run(series, spec, init, config)
        return r, run, None
    except (DegenerateLikelihoodError, np.linalg.LinAlgError, FloatingPointError,
            InvalidParameterError) as exc:
        return r, None, f"{type(exc).__name__}: {exc}"


def em_fit(series, spec: ModelSpec, config: EMConfig = EMConfig()) -> FittedModel:
    """Best of ``config.n_restarts`` EM runs from random starting points."""
    n_obs = _n_informative_days(series)
    if n_obs < 2 * spec.T:
        raise InsufficientDataError(f"need at least {2 * spec.T} observed days, got {n_obs}")
    spec.check_calendar(series.calendar, series.n)
    jobs = [(series, spec, config, r) for r in range(config.n_restarts)]
    if config.threads > 1:
        with ProcessPoolExecutor(config.threads) as pool:
            results = list(pool.map(_restart, jobs))
    else:
        results = [_restart(j) for j in jobs]

    diagnostics = []
    best = None
    for r, run, err in results:
        if run is None:
            diagnostics.append({"restart": r, "error": err})
            log.warning("restart %d failed: %s", r, err)
            continue
        diagnostics.append({"restart": r, "loglik": run.loglik, "iterations": run.iterations,
                            "converged": run.converged})
        if best is None or run.loglik > best.loglik:
            best = run
    if best is None:
        raise FitFailureError("all EM restarts failed", diagnostics)
    k = count_parameters(spec)
    return FittedModel(
        spec=spec, params=best.params, loglik=best.loglik, bic=bic(best.loglik, k, n_obs),
        n_params=k, iterations=best.iterations,
        restart_logliks=sorted((d["loglik"] for d in diagnostics if "loglik" in d), reverse=True),
        converged=best.converged, calendar=series.calendar, n_obs=n_obs,
        loglik_trace=best.trace, restart_diagnostics=diagnostics,
        data_fingerprint=series.fingerprint())


@dataclass
class SelectionRow:
    K: int
    loglik: float
    n_params: int
    bic: float
    error: str = ""


def select_best(rows: Sequence[SelectionRow], tie_tol: float = 1e-9) -> SelectionRow:
    """Smallest BIC; near-ties go to the smaller K."""
    ok = [r for r in rows if not r.error]
    if not ok:
        raise FitFailureError("every candidate failed", [r.__dict__ for r in rows])
    low = min(r.bic for r in ok)
    return min((r for r in ok if r.bic <= low + tie_tol), key=lambda r: r.K)


def select_K(series, specs: Sequence[ModelSpec], config: EMConfig = EMConfig()):
    """Fit every candidate spec; returns (best FittedModel, selection table)."""
    specs = list(specs)
    if not specs:
        raise ValueError("no candidate specs")
    base = specs[0]
    for s in specs[1:]:
        if s.with_K(base.K) != base:
            raise ValueError("candidate specs must differ only in K")
    fits, rows = {}, []
    for s in specs:
        try:
            fit = em_fit(series, s, config)
        except (FitFailureError, InsufficientDataError) as exc:
            rows.append(SelectionRow(s.K, math.nan, count_parameters(s), math.nan, str(exc)))
            continue
        fits[s.K] = fit
        rows.append(SelectionRow(s.K, fit.loglik, fit.n_params, fit.bic))
    best = select_best(rows)
    return fits[best.K], rows
