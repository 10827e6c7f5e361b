"""Validation statistics comparing an observed series with simulated ones.

Every statistic maps one bivariate series to a vector over labelled bins. The
observed value of each bin is set against the Monte-Carlo distribution of the
same statistic over simulated trajectories: mean and 2.5%/97.5% quantiles.

Conventions:

* quantiles interpolate linearly between order statistics (``numpy``'s
  default ``linear`` method);
* daily moments are population moments across years; kurtosis is the raw
  standardised fourth moment (3 for a Gaussian), not the excess;
* a missing day breaks runs (spells, clusters) and is excluded elsewhere.
"""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data_io import DOY_MONTH, DEFAULT_PERIOD

log = logging.getLogger(__name__)

DEFAULT_PROBS = np.arange(1, 1000) / 1000.0


# ---------------------------------------------------------------------------
# elementary statistics


def quantile_curve(x, probs=DEFAULT_PROBS) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("no non-missing values")
    return np.quantile(x, probs)


def year_panel(x, period: int = DEFAULT_PERIOD) -> np.ndarray:
    """Reshape a daily series to (years, period), padding a partial year with NaN."""
    x = np.asarray(x, dtype=float)
    n_years = -(-x.size // period)
    out = np.full(n_years * period, np.nan)
    out[: x.size] = x
    return out.reshape(n_years, period)


def daily_moments(x, period: int = DEFAULT_PERIOD) -> dict:
    """Mean, sd, skewness and kurtosis across years for each day of year."""
    P = year_panel(x, period)
    ok = ~np.isnan(P)
    cnt = ok.sum(axis=0)
    Z = np.where(ok, P, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = Z.sum(axis=0) / cnt
        dev = np.where(ok, P - mean, 0.0)
        m2 = (dev ** 2).sum(axis=0) / cnt
        m3 = (dev ** 3).sum(axis=0) / cnt
        m4 = (dev ** 4).sum(axis=0) / cnt
        sd = np.sqrt(m2)
        degenerate = m2 <= 1e-12 * (1.0 + mean ** 2)
        skew = np.where(degenerate, np.nan, m3 / m2 ** 1.5)
        kurt = np.where(degenerate, np.nan, m4 / m2 ** 2)
    few = cnt < 2
    for arr in (mean, sd, skew, kurt):
        arr[few] = np.nan
    return {"mean": mean, "sd": sd, "skewness": skew, "kurtosis": kurt}


def interannual_extremes(x, period: int = DEFAULT_PERIOD) -> dict:
    P = year_panel(x, period)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return {"min": np.nanmin(P, axis=0), "max": np.nanmax(P, axis=0)}


def daily_frequency(precip, period: int = DEFAULT_PERIOD) -> np.ndarray:
    P = year_panel(precip, period)
    ok = ~np.isnan(P)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (np.where(ok, P > 0, False)).sum(axis=0) / ok.sum(axis=0)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ok = ~(np.isnan(a) | np.isnan(b))
    a, b = a[ok], b[ok]
    if a.size < 2:
        return np.nan
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    if den <= 0:
        return np.nan
    return float(a @ b / den)


def autocorr(x, lags: Sequence[int] = (1, 2, 3)) -> np.ndarray:
    """Pearson correlation of ``(x_t, x_{t+lag})`` over pairs with both values present."""
    x = np.asarray(x, dtype=float)
    if x.size <= max(lags) + 1:
        raise ValueError("series too short for requested lags")
    return np.array([_pearson(x[:-lag], x[lag:]) for lag in lags])


def run_lengths(mask) -> np.ndarray:
    """Lengths of maximal runs of True."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(m.astype(np.int8)))
    return edges[1::2] - edges[0::2]


def length_histogram(lengths, max_length: int) -> np.ndarray:
    """Counts for lengths ``1..max_length``; the last entry counts longer runs."""
    lengths = np.asarray(lengths, dtype=np.int64)
    h = np.bincount(np.minimum(lengths, max_length + 1), minlength=max_length + 2)
    return h[1:].astype(float)


@dataclass(frozen=True)
class QuantileAbove:
    alpha: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class QuantileBelow:
    alpha: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class Absolute:
    u: float
    above: bool = True


@dataclass(frozen=True)
class ClusterSpec:
    rule: Union[QuantileAbove, QuantileBelow, Absolute]
    variable: str = "temp"

    def threshold(self, reference) -> tuple:
        """(u, above) resolved against a reference series."""
        r = self.rule
        if isinstance(r, Absolute):
            return r.u, r.above
        ref = np.asarray(reference, dtype=float)
        ref = ref[~np.isnan(ref)]
        return float(np.quantile(ref, r.alpha)), isinstance(r, QuantileAbove)

    @property
    def name(self) -> str:
        r = self.rule
        if isinstance(r, QuantileAbove):
            return f"hot_clusters_q{r.alpha:g}" if self.variable == "temp" else f"{self.variable}_above_q{r.alpha:g}"
        if isinstance(r, QuantileBelow):
            return f"cold_clusters_q{r.alpha:g}" if self.variable == "temp" else f"{self.variable}_below_q{r.alpha:g}"
        return f"{self.variable}_{'above' if r.above else 'below'}_{r.u:g}"


def exceedance_runs(x, u: float, above: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore"):
        mask = (x > u) if above else (x < u)
    return run_lengths(mask & ~np.isnan(x))


def exceedance_clusters(x, spec: ClusterSpec, max_length: int = 15, reference=None) -> np.ndarray:
    """Histogram of cluster lengths strictly above/below the resolved threshold."""
    u, above = spec.threshold(x if reference is None else reference)
    return length_histogram(exceedance_runs(x, u, above), max_length)


def spell_runs(precip) -> dict:
    p = np.asarray(precip, dtype=float)
    ok = ~np.isnan(p)
    return {"dry": run_lengths(ok & (p == 0)), "wet": run_lengths(ok & (p > 0))}


def spells(precip, max_length: int = 30) -> dict:
    runs = spell_runs(precip)
    return {k: length_histogram(v, max_length) for k, v in runs.items()}


@dataclass
class Totals:
    labels: list
    totals: np.ndarray
    flagged: np.ndarray  # more than 10% missing


def aggregate_totals(precip, first_year: int, period: str = "year",
                     days_per_year: int = DEFAULT_PERIOD, max_missing: float = 0.1) -> Totals:
    P = year_panel(precip, days_per_year)
    n_years = P.shape[0]
    labels, totals, flagged = [], [], []
    if period == "year":
        groups = [(f"{first_year + i}", P[i]) for i in range(n_years)]
    elif period == "month":
        groups = [(f"{first_year + i}-{m:02d}", P[i][DOY_MONTH == m])
                  for i in range(n_years) for m in range(1, 13)]
    else:
        raise ValueError("period must be 'year' or 'month'")
    for label, vals in groups:
        miss = np.isnan(vals)
        labels.append(label)
        totals.append(np.nan if miss.all() else float(vals[~miss].sum()))
        flagged.append(bool(miss.mean() > max_missing))
    return Totals(labels, np.array(totals), np.array(flagged))


def monthly_correlation(precip, temp, period: int = DEFAULT_PERIOD) -> np.ndarray:
    """Pearson correlation of daily (precip, temp) pooled over years, per month."""
    p, x = np.asarray(precip, float), np.asarray(temp, float)
    months = DOY_MONTH[np.arange(p.size) % period]
    return np.array([_pearson(p[months == m], x[months == m]) for m in range(1, 13)])


def gaussian_kernel(x):
    return np.exp(-0.5 * np.asarray(x) ** 2)


def _kernel_ratio(weights_y: np.ndarray, precip: np.ndarray, mode: str) -> np.ndarray:
    """``weights_y`` (n, G) already includes any time weights."""
    wet = (precip > 0).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        if mode == "occurrence":
            num, den = wet @ weights_y, np.ones_like(wet) @ weights_y
        elif mode == "intensity":
            num, den = np.where(wet > 0, precip, 0.0) @ weights_y, wet @ weights_y
        else:
            raise ValueError("mode must be 'occurrence' or 'intensity'")
        out = num / den
    out[~(den > 0)] = np.nan
    return out


def _pairs(precip, temp):
    p, x = np.asarray(precip, float), np.asarray(temp, float)
    ok = ~(np.isnan(p) | np.isnan(x))
    return p, x, ok


def kernel_conditional(precip, temp, mode: str, y_grid, h: float = 2.0) -> np.ndarray:
    """``r(y)`` (occurrence) or ``R(y)`` (mean wet amount) given temperature ``y``."""
    p, x, ok = _pairs(precip, temp)
    y_grid = np.asarray(y_grid, dtype=float)
    Ky = gaussian_kernel((x[ok][:, None] - y_grid[None, :]) / h)
    return _kernel_ratio(Ky, p[ok], mode)


def cyclic_distance(t, s, period: int = DEFAULT_PERIOD):
    diff = np.abs(np.asarray(t) - np.asarray(s))
    return np.minimum(diff, period - diff)


def kernel_conditional_seasonal(precip, temp, t: int, mode: str, y_grid, h1: float = 15.0,
                                h2: float = 2.0, period: int = DEFAULT_PERIOD):
    """``r(t, y)`` / ``R(t, y)`` with a cyclic day-of-year kernel.

    Returns ``(values, extrapolated)``; grid points outside the range of
    temperatures observed on day of year ``t`` are flagged as extrapolated.
    """
    p, x, ok = _pairs(precip, temp)
    doy = np.arange(p.size) % period + 1
    y_grid = np.asarray(y_grid, dtype=float)
    wt = gaussian_kernel(cyclic_distance(t, doy[ok], period) / h1)
    Ky = gaussian_kernel((y_grid[None, :] - x[ok][:, None]) / h2) * wt[:, None]
    values = _kernel_ratio(Ky, p[ok], mode)
    same_day = x[ok][doy[ok] == t]
    if same_day.size:
        extrap = (y_grid < same_day.min()) | (y_grid > same_day.max())
    else:
        extrap = np.ones(y_grid.size, dtype=bool)
    return values, extrap


# ---------------------------------------------------------------------------
# statistic registry


@dataclass
class ReportConfig:
    probs: np.ndarray = field(default_factory=lambda: DEFAULT_PROBS.copy())
    lags: tuple = (1, 2, 3)
    hot_quantiles: tuple = (0.95,)
    cold_quantiles: tuple = (0.05,)
    cluster_max_length: int = 15
    spell_max_length: int = 30
    kernel_h: float = 2.0
    seasonal_h1: float = 15.0
    seasonal_h2: float = 2.0
    seasonal_days: tuple = (15, 105, 196, 288)
    y_grid: Optional[np.ndarray] = None
    period: int = DEFAULT_PERIOD
    first_year: int = 2000


@dataclass
class _Context:
    config: ReportConfig
    y_grid: np.ndarray
    thresholds: dict


def _stat_temp_quantiles(p, x, c):
    return [f"{q:.3f}" for q in c.config.probs], quantile_curve(x, c.config.probs)


def _stat_precip_quantiles(p, x, c):
    return [f"{q:.3f}" for q in c.config.probs], quantile_curve(p, c.config.probs)


def _doy_bins(period):
    return [str(i) for i in range(1, period + 1)]


def _moment(var, key):
    def f(p, x, c):
        series = x if var == "temp" else p
        return _doy_bins(c.config.period), daily_moments(series, c.config.period)[key]
    return f


def _extreme(var, key):
    def f(p, x, c):
        series = x if var == "temp" else p
        return _doy_bins(c.config.period), interannual_extremes(series, c.config.period)[key]
    return f


def _stat_precip_frequency(p, x, c):
    return _doy_bins(c.config.period), daily_frequency(p, c.config.period)


def _stat_autocorr(p, x, c):
    return [str(l) for l in c.config.lags], autocorr(x, c.config.lags)


def _cluster_stat(spec: ClusterSpec):
    def f(p, x, c):
        u, above = c.thresholds[spec.name]
        runs = exceedance_runs(x if spec.variable == "temp" else p, u, above)
        L = c.config.cluster_max_length
        return _length_bins(L), length_histogram(runs, L)
    return f


def _length_bins(L):
    return [str(i) for i in range(1, L + 1)] + [f">{L}"]


def _spell_stat(kind):
    def f(p, x, c):
        L = c.config.spell_max_length
        return _length_bins(L), length_histogram(spell_runs(p)[kind], L)
    return f


def _stat_yearly_totals(p, x, c):
    tot = aggregate_totals(p, c.config.first_year, "year", c.config.period)
    vals = np.sort(tot.totals[~tot.flagged])
    return [f"rank{i + 1}" for i in range(vals.size)], vals


def _monthly_totals(key):
    def f(p, x, c):
        tot = aggregate_totals(p, c.config.first_year, "month", c.config.period)
        vals = np.where(tot.flagged, np.nan, tot.totals)
        n_years = vals.size // 12
        M = vals[: n_years * 12].reshape(n_years, 12)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = np.nanmean(M, axis=0) if key == "mean" else np.nanstd(M, axis=0, ddof=1)
        return [str(m) for m in range(1, 13)], out
    return f


def _stat_monthly_corr(p, x, c):
    return [str(m) for m in range(1, 13)], monthly_correlation(p, x, c.config.period)


def _kernel_stat(mode):
    def f(p, x, c):
        return [f"{y:g}" for y in c.y_grid], kernel_conditional(p, x, mode, c.y_grid, c.config.kernel_h)
    return f


def _seasonal_kernel_stat(mode):
    def f(p, x, c):
        labels, vals, flags = [], [], []
        for t in c.config.seasonal_days:
            v, e = kernel_conditional_seasonal(p, x, t, mode, c.y_grid, c.config.seasonal_h1,
                                               c.config.seasonal_h2, c.config.period)
            labels += [f"{t}:{y:g}" for y in c.y_grid]
            vals.append(v)
            flags.append(e)
        return labels, np.concatenate(vals), {"extrapolated": np.concatenate(flags)}
    return f


def statistic_table(config: ReportConfig) -> dict:
    table = {
        "temp_quantiles": _stat_temp_quantiles,
        "precip_quantiles": _stat_precip_quantiles,
    }
    for var in ("temp", "precip"):
        for key in ("mean", "sd", "skewness", "kurtosis"):
            table[f"{var}_daily_{key}"] = _moment(var, key)
        for key in ("min", "max"):
            table[f"{var}_daily_{key}"] = _extreme(var, key)
    table["precip_daily_frequency"] = _stat_precip_frequency
    table["temp_autocorr"] = _stat_autocorr
    for spec in cluster_specs(config):
        table[spec.name] = _cluster_stat(spec)
    table["dry_spells"] = _spell_stat("dry")
    table["wet_spells"] = _spell_stat("wet")
    table["yearly_totals_sorted"] = _stat_yearly_totals
    table["monthly_totals_mean"] = _monthly_totals("mean")
    table["monthly_totals_sd"] = _monthly_totals("sd")
    table["monthly_correlation"] = _stat_monthly_corr
    table["precip_occurrence_given_temp"] = _kernel_stat("occurrence")
    table["precip_intensity_given_temp"] = _kernel_stat("intensity")
    table["seasonal_occurrence_given_temp"] = _seasonal_kernel_stat("occurrence")
    table["seasonal_intensity_given_temp"] = _seasonal_kernel_stat("intensity")
    return table


def cluster_specs(config: ReportConfig) -> list:
    return ([ClusterSpec(QuantileAbove(a)) for a in config.hot_quantiles]
            + [ClusterSpec(QuantileBelow(a)) for a in config.cold_quantiles])


def default_statistics(config: Optional[ReportConfig] = None) -> list:
    return list(statistic_table(config or ReportConfig()))


# ---------------------------------------------------------------------------
# Monte-Carlo report


@dataclass
class StatisticReport:
    name: str
    bins: list
    observed: np.ndarray
    simulated: np.ndarray  # (n_sims, n_bins)
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    covered: np.ndarray  # 1.0 / 0.0, NaN where undefined
    extra: dict = field(default_factory=dict)
    note: str = ""

    @property
    def n_sims(self) -> int:
        return self.simulated.shape[0]

    @property
    def coverage(self) -> float:
        ok = ~np.isnan(self.covered)
        return float(self.covered[ok].mean()) if ok.any() else float("nan")


def _band(values: np.ndarray):
    """Mean and 2.5%/97.5% quantiles across simulations (axis 0)."""
    v = np.sort(values, axis=0)  # fixes summation order: result independent of batch order
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(v, axis=0)
        lo, hi = np.nanquantile(v, [0.025, 0.975], axis=0)
    # a degenerate band means every simulation agrees; report that value exactly
    mean = np.where(lo == hi, lo, mean)
    return mean, lo, hi


def _resolve_context(obs_precip, obs_temp, config: ReportConfig) -> _Context:
    grid = config.y_grid
    if grid is None:
        x = obs_temp[~np.isnan(obs_temp)]
        grid = np.arange(np.floor(x.min()), np.ceil(x.max()) + 1.0) if x.size else np.zeros(1)
    thresholds = {s.name: s.threshold(obs_temp if s.variable == "temp" else obs_precip)
                  for s in cluster_specs(config)}
    return _Context(config, np.asarray(grid, dtype=float), thresholds)


def build_report(observed, sims: Sequence, statistics: Optional[Sequence[str]] = None,
                 config: Optional[ReportConfig] = None) -> list:
    """Compute each statistic on the observed series and on every simulation.

    ``observed`` needs ``precip``/``temp`` arrays (a DailySeries or a
    Trajectory); ``sims`` is a sequence of such objects. Cluster thresholds and
    the temperature grid are taken from the observed series and reused for
    every simulation.
    """
    if len(sims) < 2:
        raise ValueError("need at least two simulations")
    config = config or ReportConfig()
    table = statistic_table(config)
    names = list(statistics) if statistics is not None else list(table)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise KeyError(f"unknown statistics: {unknown}")
    op, ox = np.asarray(observed.precip, float), np.asarray(observed.temp, float)
    if any(s.precip.size != op.size for s in sims):
        log.warning("simulation length differs from observed length; "
                    "day-of-year statistics are aligned by calendar position")
    ctx = _resolve_context(op, ox, config)
    reports = []
    for name in names:
        fn = table[name]
        try:
            res = fn(op, ox, ctx)
            bins, obs_vals = res[0], np.asarray(res[1], dtype=float)
            extra = res[2] if len(res) > 2 else {}
            sim_vals = np.full((len(sims), len(bins)), np.nan)
            for i, s in enumerate(sims):
                r = fn(np.asarray(s.precip, float), np.asarray(s.temp, float), ctx)
                v = np.asarray(r[1], dtype=float)
                m = min(v.size, len(bins))
                sim_vals[i, :m] = v[:m]
        except (ValueError, FloatingPointError) as exc:
            reports.append(StatisticReport(name, [], np.array([]), np.zeros((len(sims), 0)),
                                           np.array([]), np.array([]), np.array([]), np.array([]),
                                           note=f"failed: {exc}"))
            continue
        mean, lo, hi = _band(sim_vals)
        with np.errstate(invalid="ignore"):
            covered = np.where(np.isnan(obs_vals) | np.isnan(lo) | np.isnan(hi), np.nan,
                               ((obs_vals >= lo) & (obs_vals <= hi)).astype(float))
        reports.append(StatisticReport(name, list(bins), obs_vals, sim_vals, mean, lo, hi,
                                       covered, extra))
    return reports


def _num(v) -> str:
    return "NA" if not np.isfinite(v) else repr(float(v))


def format_report(rep: StatisticReport, header_lines=()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    buf.write(f"# statistic: {rep.name}\n# n_sims: {rep.n_sims}\n")
    if rep.note:
        buf.write(f"# note: {rep.note}\n")
    extra_cols = sorted(rep.extra)
    buf.write(",".join(["bin", "observed", "sim_mean", "lo", "hi", "covered"] + extra_cols) + "\n")
    for i, b in enumerate(rep.bins):
        cov = "NA" if np.isnan(rep.covered[i]) else str(int(rep.covered[i]))
        row = [b, _num(rep.observed[i]), _num(rep.mean[i]), _num(rep.lo[i]), _num(rep.hi[i]), cov]
        row += [str(int(rep.extra[c][i])) for c in extra_cols]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def write_reports(out_dir, reports: Sequence[StatisticReport], header_lines=()) -> dict:
    """One delimited file per statistic plus ``coverage_summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for rep in reports:
        (out_dir / f"{rep.name}.csv").write_text(format_report(rep, header_lines), encoding="utf-8")
        cov = rep.coverage
        summary[rep.name] = None if np.isnan(cov) else cov
    doc = {"header": list(header_lines), "coverage": summary}
    (out_dir / "coverage_summary.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return summary
