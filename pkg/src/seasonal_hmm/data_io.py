"""Daily station series: ECA&D ingestion, calendar normalisation, summaries.

Series are stored on a 365-day calendar (February 29 dropped) so that day
``t`` and day ``t + 365`` always share a day of year.
"""

from __future__ import annotations

import hashlib
import io
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .model import DEFAULT_PERIOD, Calendar, Observation

SERIES_FORMAT = "seasonal-hmm series v1"
MONTH_LENGTHS = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])
# month (1..12) of every day of a 365-day year
DOY_MONTH = np.repeat(np.arange(1, 13), MONTH_LENGTHS)
SEASONS = {"DJF": (12, 1, 2), "MAM": (3, 4, 5), "JJA": (6, 7, 8), "SON": (9, 10, 11)}
DEFAULT_DRY_THRESHOLD = 0.1


class DataFormatError(ValueError):
    """Input file cannot be interpreted."""


@dataclass(frozen=True)
class StationMeta:
    id: str
    name: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90 <= self.latitude <= 90 or not -180 <= self.longitude <= 180:
            raise DataFormatError(f"station {self.id}: coordinates out of range")


@dataclass
class DailySeries:
    """Bivariate daily series on a 365-day calendar; NaN marks missing values."""

    precip: np.ndarray
    temp: np.ndarray
    first_year: int
    station_id: str = ""
    period: int = DEFAULT_PERIOD

    def __post_init__(self):
        self.precip = np.asarray(self.precip, dtype=float)
        self.temp = np.asarray(self.temp, dtype=float)
        if self.precip.shape != self.temp.shape or self.precip.ndim != 1:
            raise ValueError("precip and temp must be 1-d arrays of equal length")
        if np.any(self.precip[~np.isnan(self.precip)] < 0):
            raise ValueError("precipitation must be non-negative")

    @property
    def n(self) -> int:
        return self.precip.size

    @property
    def calendar(self) -> Calendar:
        return Calendar(self.first_year, self.period)

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.n + 1)

    @property
    def day_of_year(self) -> np.ndarray:
        return (self.t - 1) % self.period + 1

    @property
    def year(self) -> np.ndarray:
        return self.first_year + (self.t - 1) // self.period

    @property
    def month(self) -> np.ndarray:
        return DOY_MONTH[self.day_of_year - 1]

    @property
    def n_years(self) -> int:
        return -(-self.n // self.period)

    @property
    def dates(self) -> np.ndarray:
        return calendar_dates(self.first_year, self.n_years)[: self.n]

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            p, x = self.precip[i], self.temp[i]
            yield Observation(None if np.isnan(p) else float(p), None if np.isnan(x) else float(x),
                              i + 1, int((i % self.period) + 1))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.first_year}:{self.period}:{self.n}".encode())
        h.update(self.precip.tobytes())
        h.update(self.temp.tobytes())
        return h.hexdigest()[:16]

    def slice_days(self, n: int) -> "DailySeries":
        return replace(self, precip=self.precip[:n], temp=self.temp[:n])


def calendar_dates(first_year: int, n_years: int) -> np.ndarray:
    start = np.datetime64(f"{first_year:04d}-01-01")
    stop = np.datetime64(f"{first_year + n_years:04d}-01-01")
    days = np.arange(start, stop, dtype="datetime64[D]")
    return days[~_is_feb29(days)]


def _is_feb29(days: np.ndarray) -> np.ndarray:
    months = days.astype("datetime64[M]")
    dom = (days - months).astype(int) + 1
    return (months.astype(int) % 12 == 1) & (dom == 29)


def apply_dryness_threshold(series: DailySeries, threshold: float = DEFAULT_DRY_THRESHOLD) -> DailySeries:
    """Set precipitation below ``threshold`` mm to exactly zero."""
    p = series.precip.copy()
    p[p < threshold] = 0.0
    return replace(series, precip=p)


# ---------------------------------------------------------------------------
# ECA&D blended daily files


@dataclass
class EcadRecords:
    variable: str
    staid: str
    dates: np.ndarray
    values: np.ndarray
    quality: np.ndarray
    station_name: str = ""
    diagnostics: list = field(default_factory=list)


_UNITS = {"RR": 0.1, "TG": 0.1}


def parse_ecad(content: str, variable: str, suspect_as_missing: bool = True) -> EcadRecords:
    """Parse an ECA&D blended daily file (``RR_STAIDxxxxxx.txt``/``TG_...``).

    Values are converted from tenths to mm / degC. Quality code 9, and 1 when
    ``suspect_as_missing``, yields NaN. Rows that cannot be parsed or carry
    negative precipitation go to ``diagnostics`` as (line number, text, reason).
    """
    variable = variable.upper()
    if variable not in _UNITS:
        raise DataFormatError(f"unsupported variable {variable!r}")
    lines = content.splitlines()
    header_at = None
    for i, line in enumerate(lines):
        if line.strip().upper().startswith("STAID,"):
            header_at = i
            break
    if header_at is None:
        raise DataFormatError("no 'STAID, SOUID, DATE, ...' header row found")
    columns = [c.strip().upper() for c in lines[header_at].split(",")]
    if len(columns) < 5 or columns[3] != variable:
        raise DataFormatError(f"header {columns} does not describe a {variable} file")

    name = ""
    for line in lines[:header_at]:
        m = re.search(r"blended series of station\s+(.*?)\s*\(STAID", line, re.IGNORECASE)
        if m:
            name = m.group(1).strip()

    scale = _UNITS[variable]
    staid, dates, values, quality, diag = "", [], [], [], []
    for lineno, line in enumerate(lines[header_at + 1:], start=header_at + 2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            sid, _, ds, raw, q = parts
            date = np.datetime64(f"{ds[:4]}-{ds[4:6]}-{ds[6:8]}", "D")
            if len(ds) != 8:
                raise ValueError(f"bad date {ds!r}")
            raw, q = int(raw), int(q)
        except ValueError as exc:
            diag.append((lineno, line, str(exc)))
            continue
        if q not in (0, 1, 9):
            diag.append((lineno, line, f"unknown quality code {q}"))
            continue
        value = raw / round(1 / scale)
        if q == 9 or raw == -9999 or (q == 1 and suspect_as_missing):
            value = np.nan
        elif variable == "RR" and value < 0:
            diag.append((lineno, line, "negative precipitation"))
            value = np.nan
        staid = staid or sid
        dates.append(date)
        values.append(value)
        quality.append(q)
    if not dates:
        raise DataFormatError("no data rows")
    return EcadRecords(variable, staid, np.array(dates, dtype="datetime64[D]"),
                       np.array(values, dtype=float), np.array(quality, dtype=int), name, diag)


def read_ecad(path, variable: str, suspect_as_missing: bool = True) -> EcadRecords:
    return parse_ecad(Path(path).read_text(encoding="latin-1"), variable, suspect_as_missing)


def _dms(text: str) -> float:
    sign = -1.0 if text.strip().startswith("-") else 1.0
    d, m, s = (abs(float(x)) for x in text.strip().lstrip("+-").split(":"))
    return sign * (d + m / 60 + s / 3600)


def parse_stations(content: str) -> dict:
    """Parse an ECA&D ``stations.txt`` into ``{staid: StationMeta}``."""
    out = {}
    lines = content.splitlines()
    start = next((i for i, l in enumerate(lines) if l.strip().upper().startswith("STAID,")), None)
    if start is None:
        raise DataFormatError("no station header row found")
    for line in lines[start + 1:]:
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 5:
            continue
        meta = StationMeta(parts[0], parts[1], _dms(parts[3]), _dms(parts[4]))
        out[meta.id] = meta
    return out


def _years_of(dates: np.ndarray) -> tuple:
    return int(str(dates.min())[:4]), int(str(dates.max())[:4])


def merge_and_normalize(precip: Optional[EcadRecords], temp: Optional[EcadRecords],
                        years: Optional[tuple] = None) -> tuple:
    """Outer-join the two variables on date over whole years ``(first, last)``.

    Returns ``(series, missing_summary)``. Without ``years`` the range is the
    years covered by both inputs.
    """
    inputs = [r for r in (precip, temp) if r is not None]
    if not inputs:
        raise DataFormatError("need at least one variable")
    if years is None:
        spans = [_years_of(r.dates) for r in inputs]
        years = (max(s[0] for s in spans), min(s[1] for s in spans))
    first, last = int(years[0]), int(years[1])
    if last < first:
        raise DataFormatError("records do not overlap in time")
    dates = calendar_dates(first, last - first + 1)

    def align(rec):
        out = np.full(dates.size, np.nan)
        if rec is None:
            return out
        pos = np.searchsorted(dates, rec.dates)
        ok = (pos < dates.size)
        ok[ok] &= dates[pos[ok]] == rec.dates[ok]
        out[pos[ok]] = rec.values[ok]
        return out

    p, x = align(precip), align(temp)
    if np.all(np.isnan(p)) and np.all(np.isnan(x)):
        raise DataFormatError(f"no observations in {first}-{last}")
    staid = next((r.staid for r in inputs if r.staid), "")
    series = DailySeries(p, x, first, station_id=staid)
    summary = {
        "n_days": int(dates.size),
        "first_year": first,
        "last_year": last,
        "precip_missing_fraction": float(np.isnan(p).mean()),
        "temp_missing_fraction": float(np.isnan(x).mean()),
    }
    return series, summary


# ---------------------------------------------------------------------------
# summaries


def summary_stats(series: DailySeries, dry_threshold: float = DEFAULT_DRY_THRESHOLD) -> dict:
    p = series.precip
    ok = ~np.isnan(p)
    if not ok.any() and np.all(np.isnan(series.temp)):
        raise ValueError("empty series")
    pv = p[ok]
    wet = pv >= dry_threshold
    out = {
        "mean_yearly_precip": float(pv.mean() * series.period) if pv.size else np.nan,
        "max_daily_precip": float(pv.max()) if pv.size else np.nan,
        "precip_frequency": float(wet.mean()) if pv.size else np.nan,
        "mean_positive_precip": float(pv[wet].mean()) if wet.any() else np.nan,
    }
    months = series.month
    for name, ms in SEASONS.items():
        sel = np.isin(months, ms) & ~np.isnan(series.temp)
        vals = series.temp[sel]
        out[f"temp_mean_{name}"] = float(vals.mean()) if vals.size else np.nan
        out[f"temp_sd_{name}"] = float(vals.std(ddof=1)) if vals.size > 1 else np.nan
    return out


# ---------------------------------------------------------------------------
# internal series format


def _fmt(v: float) -> str:
    return "NA" if np.isnan(v) else repr(float(v))


def write_series(path, series: DailySeries, header: Optional[dict] = None) -> None:
    buf = io.StringIO()
    buf.write(f"# {SERIES_FORMAT}\n")
    meta = {"station": series.station_id, "first_year": series.first_year, "period": series.period}
    meta.update(header or {})
    for k, v in meta.items():
        buf.write(f"# {k}: {v}\n")
    buf.write("date,precip,temp,flags\n")
    for d, p, x in zip(series.dates, series.precip, series.temp):
        flags = ("P" if np.isnan(p) else "") + ("T" if np.isnan(x) else "")
        buf.write(f"{d},{_fmt(p)},{_fmt(x)},{flags}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_series(path) -> DailySeries:
    meta, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# {SERIES_FORMAT}":
            raise DataFormatError(f"{path}: not a series file")
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.startswith("date,"):
                continue
            elif line.strip():
                rows.append(line.rstrip("\n").split(","))
    if "first_year" not in meta or not rows:
        raise DataFormatError(f"{path}: incomplete series file")

    def val(s):
        return np.nan if s == "NA" else float(s)

    try:
        precip = np.array([val(r[1]) for r in rows])
        temp = np.array([val(r[2]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    return DailySeries(precip, temp, int(meta["first_year"]), meta.get("station", ""),
                       int(meta.get("period", DEFAULT_PERIOD)))
