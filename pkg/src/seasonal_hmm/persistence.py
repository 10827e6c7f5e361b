"""Versioned JSON serialisation of fitted models.

Floats are written with ``repr`` precision, so a save/load round trip is exact
and identical fits produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .inference import FittedModel
from .model import Calendar, ModelSpec, Parameters, TrendForm

MODEL_FORMAT = "seasonal-hmm model"
MODEL_VERSION = 1


def _spec_to_dict(spec: ModelSpec) -> dict:
    return {"K": spec.K, "M": spec.M, "M1": spec.M1, "d": spec.d, "T": spec.T,
            "trend": spec.trend_form.kind.value, "breakpoint": spec.trend_form.breakpoint}


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(int(d["K"]), int(d["M"]), int(d["M1"]), int(d["d"]), int(d.get("T", 365)),
                     TrendForm(d.get("trend", "linear"), d.get("breakpoint")))


def model_to_dict(model: FittedModel) -> dict:
    p = model.params
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": _spec_to_dict(model.spec),
        "calendar": {"first_year": model.calendar.first_year, "period": model.calendar.period},
        "loglik": model.loglik,
        "bic": model.bic,
        "n_params": model.n_params,
        "n_obs": model.n_obs,
        "iterations": model.iterations,
        "converged": model.converged,
        "restart_logliks": list(model.restart_logliks),
        "restart_diagnostics": list(model.restart_diagnostics),
        "data_fingerprint": model.data_fingerprint,
        "params": {
            "initial_dist": p.initial_dist.tolist(),
            "beta": p.transitions.beta.tolist(),
            "states": [
                {
                    "weights": e.weights.tolist(),
                    "dry_weight": e.dry_weight,
                    "lambdas": e.lambdas.tolist(),
                    "precip_log_scale_coeffs": e.precip_season_coeffs.tolist(),
                    "means": e.means.tolist(),
                    "variances": e.variances.tolist(),
                    "temp_season_coeffs": e.temp_season_coeffs.tolist(),
                    "trend_coeffs": e.trend_coeffs.tolist(),
                }
                for e in p.emissions
            ],
        },
    }


def model_from_dict(d: dict) -> FittedModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a model file")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}")
    spec = spec_from_dict(d["spec"])
    ps = d["params"]
    st = ps["states"]
    stacked = {
        "pi": np.array(ps["initial_dist"]),
        "beta": np.array(ps["beta"], dtype=float).reshape(spec.K, spec.K - 1, spec.D),
        "weights": np.array([s["weights"] for s in st]),
        "lambdas": np.array([s["lambdas"] for s in st]),
        "precip_season": np.array([s["precip_log_scale_coeffs"] for s in st]),
        "means": np.array([s["means"] for s in st]),
        "variances": np.array([s["variances"] for s in st]),
        "temp_season": np.array([s["temp_season_coeffs"] for s in st]),
        "trend": np.array([s["trend_coeffs"] for s in st]),
    }
    params = Parameters.from_stacked(stacked)
    params.check(spec)
    cal = d["calendar"]
    return FittedModel(
        spec=spec, params=params, loglik=d["loglik"], bic=d["bic"], n_params=d["n_params"],
        iterations=d["iterations"], restart_logliks=d["restart_logliks"],
        converged=d["converged"], calendar=Calendar(cal["first_year"], cal["period"]),
        n_obs=d["n_obs"], restart_diagnostics=d.get("restart_diagnostics", []),
        data_fingerprint=d.get("data_fingerprint", ""))


def save_model(path, model: FittedModel, header: dict | None = None) -> None:
    d = model_to_dict(model)
    if header:
        d = {"header": header, **d}
    Path(path).write_text(json.dumps(d, indent=1) + "\n", encoding="utf-8")


def load_model(path) -> FittedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
