import numpy as np
import pytest

from seasonal_hmm.inference import FittedModel
from seasonal_hmm.model import Calendar, ModelSpec, Parameters


def random_params(spec: ModelSpec, rng, beta_scale=1.0) -> Parameters:
    K, M, M1, D = spec.K, spec.M, spec.M1, spec.D
    a = {
        "beta": rng.normal(0, beta_scale, (K, K - 1, D)),
        "pi": rng.dirichlet(np.ones(K)),
        "weights": rng.dirichlet(np.ones(M), size=K),
        "lambdas": rng.uniform(0.2, 2.0, (K, M - M1)),
        "precip_season": rng.normal(0, 0.3, (K, D)),
        "means": rng.normal(0, 3, (K, M)),
        "variances": rng.uniform(0.5, 4.0, (K, M)),
        "temp_season": rng.normal(0, 2, (K, D)),
        "trend": rng.normal(0, 0.1, (K, spec.trend_form.n_coeffs)),
    }
    return Parameters.from_stacked(a)


def separated_params() -> Parameters:
    """Two well separated states: a dry warm one and a wet cool one."""
    a = dict(
        beta=np.array([[[1.5, 1.0, 0.0]], [[-1.5, 0.5, 0.0]]]),
        pi=np.array([0.5, 0.5]),
        weights=np.array([[0.9, 0.1], [0.1, 0.9]]),
        lambdas=np.array([[0.5], [0.2]]),
        precip_season=np.array([[0.0, 0.3, 0.0], [0.0, 0.3, 0.0]]),
        means=np.array([[12.0, 16.0], [6.0, 8.0]]),
        variances=np.array([[4.0, 4.0], [3.0, 3.0]]),
        temp_season=np.array([[0.0, -8.0, -2.0], [0.0, -8.0, -2.0]]),
        trend=np.array([[0.0, 0.02], [0.0, 0.02]]),
    )
    return Parameters.from_stacked(a)


def as_model(spec, params, first_year=1960) -> FittedModel:
    return FittedModel(spec, params, 0.0, 0.0, 0, 0, [], True, Calendar(first_year))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def separated_model():
    return as_model(ModelSpec(2, 2, 1, 1), separated_params())


def ecad_text(variable, dates, raw, quality=None, staid=42, name="TESTVILLE"):
    """ECA&D blended-series text with values given in tenths of a unit."""
    quality = [0] * len(raw) if quality is None else quality
    head = [
        "EUROPEAN CLIMATE ASSESSMENT & DATASET (ECA&D), file created on: 01-01-2020",
        "",
        f"This is the blended series of station {name} (STAID: {staid})",
        "FILE FORMAT (MISSING VALUE CODE IS -9999):",
        "",
        f"STAID, SOUID,    DATE,   {variable}, Q_{variable}",
    ]
    rows = [f"{staid:6d},   101,{str(d).replace('-', '')},{int(v):5d},{int(q):5d}"
            for d, v, q in zip(np.asarray(dates, dtype="datetime64[D]"), raw, quality)]
    return "\n".join(head + rows) + "\n"


def daily_dates(first_year, last_year):
    return np.arange(np.datetime64(f"{first_year}-01-01"), np.datetime64(f"{last_year + 1}-01-01"))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number, title, passed, detail=""):
        ACCEPTANCE_LINES.append(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
                                + (f" ({detail})" if detail else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
