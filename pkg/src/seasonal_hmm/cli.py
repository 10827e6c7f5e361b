"""Command-line pipeline: ingest, trend, fit, simulate, validate, report.

All stages read one JSON run configuration (``--config``); any entry can be
overridden with ``--set section.key=value`` where ``value`` is parsed as JSON
when possible. Stages communicate only through files in the output directory:

========================  ===========================================
``series.csv``            normalised daily series (ingest)
``summary.csv``           basic precipitation/temperature summary
``missing.json``          missing-data fractions
``diagnostics.txt``       rejected input rows
``trend.csv``             trend test report
``site_profile.json``     chosen trend form, read by ``fit``
``model.json``            fitted model
``selection.csv``         per-K log-likelihood, parameter count, BIC
``fit_diagnostics.json``  per-restart outcome
``batch.npz``             simulated trajectories (or ``trajectories.csv``)
``validation/``           one table per statistic, coverage summary
``report/``               state frequencies and seasonal curves
========================  ===========================================

Exit codes: 0 success, 2 user or configuration error, 3 data-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import data_io, inference, simulate as sim, trends, validate
from .model import InvalidParameterError, ModelSpec, TrendForm, harmonic_design, trend_design
from .persistence import load_model, save_model

log = logging.getLogger("seasonal_hmm")

EXIT_OK, EXIT_USER, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "output_dir": "out",
    "site": "",
    "ingest": {"precip_file": None, "temp_file": None, "years": None,
               "dry_threshold": data_io.DEFAULT_DRY_THRESHOLD, "suspect_as_missing": True},
    "trend": {"alpha": 0.05, "force": None, "min_days": 300},
    "model": {"K": [4, 5, 6, 7, 8], "M": 4, "M1": 2, "d": 2, "T": 365, "trend": "auto"},
    "em": {"max_iters": 500, "rel_tol": 1e-6, "n_restarts": 20, "mstep_max_evals": 100,
           "variance_floor": 1e-4},
    "simulate": {"n_trajectories": 1000, "n_days": None, "emit_states": False,
                 "initial_state": "stationary", "format": "npz"},
    "validate": {"statistics": None, "hot_quantiles": [0.95], "cold_quantiles": [0.05],
                 "cluster_max_length": 15, "spell_max_length": 30, "kernel_h": 2.0,
                 "seasonal_h1": 15.0, "seasonal_h2": 2.0, "seasonal_days": [15, 105, 196, 288],
                 "y_grid": None},
}


class UserError(Exception):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise UserError(f"override must look like section.key=value: {assignment!r}")
    *path, last = key.split(".")
    node = cfg
    for p in path:
        if not isinstance(node.get(p), dict):
            raise UserError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if last not in node:
        raise UserError(f"unknown config key {key!r}")
    node[last] = _parse_value(value)


def load_config(path=None, overrides=(), base_dir=None) -> dict:
    user = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UserError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UserError(f"{p}: invalid JSON: {exc}") from None
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise UserError(f"{p}: unknown config keys {sorted(unknown)}")
        base_dir = p.parent
    cfg = _merge(DEFAULT_CONFIG, user)
    for o in overrides:
        apply_override(cfg, o)
    cfg["_base_dir"] = str(base_dir or Path.cwd())
    return cfg


def config_hash(cfg: dict) -> str:
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(public, sort_keys=True).encode()).hexdigest()[:16]


def _path(cfg: dict, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_base_dir"]) / p


def _out(cfg: dict, *parts) -> Path:
    d = _path(cfg, cfg["output_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d.joinpath(*parts)


def header(cfg: dict, stage: str) -> dict:
    return {"tool": "seasonal-hmm", "version": tool_version(), "stage": stage,
            "config_hash": config_hash(cfg), "seed": cfg["seed"]}


def _header_lines(h: dict) -> list:
    return [f"{k}: {v}" for k, v in h.items()]


def _write_text(path: Path, h: dict, body: str) -> None:
    lines = "".join(f"# {line}\n" for line in _header_lines(h))
    path.write_text(lines + body, encoding="utf-8")


def _write_json(path: Path, h: dict, doc: dict) -> None:
    path.write_text(json.dumps({"header": h, **doc}, indent=1, sort_keys=True) + "\n",
                    encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "NA" if not np.isfinite(v) else repr(float(v))
    return str(v)


def _csv(header_row, rows) -> str:
    return "\n".join([",".join(header_row)] + [",".join(_fmt(v) for v in r) for r in rows]) + "\n"


def _read_series(cfg: dict):
    path = _out(cfg, "series.csv")
    if not path.is_file():
        raise UserError(f"series file not found: {path} (run 'ingest' first)")
    return data_io.read_series(path)


# ---------------------------------------------------------------------------
# stages


def cmd_ingest(cfg: dict) -> int:
    c = cfg["ingest"]
    recs = {}
    for var, key in (("RR", "precip_file"), ("TG", "temp_file")):
        if c[key] is None:
            continue
        p = _path(cfg, c[key])
        if not p.is_file():
            raise UserError(f"input file not found: {p}")
        recs[var] = data_io.read_ecad(p, var, c["suspect_as_missing"])
    if not recs:
        raise UserError("ingest needs ingest.precip_file and/or ingest.temp_file")
    series, missing = data_io.merge_and_normalize(recs.get("RR"), recs.get("TG"), c["years"])
    series = data_io.apply_dryness_threshold(series, c["dry_threshold"])
    if cfg["site"]:
        series.station_id = cfg["site"]
    h = header(cfg, "ingest")
    data_io.write_series(_out(cfg, "series.csv"), series, h)
    stats = data_io.summary_stats(series, c["dry_threshold"])
    _write_text(_out(cfg, "summary.csv"), h,
                _csv(["statistic", "value"], sorted(stats.items())))
    _write_json(_out(cfg, "missing.json"), h, {"missing": missing})
    diag = [f"{var}: {d}" for var, r in sorted(recs.items()) for d in r.diagnostics]
    _write_text(_out(cfg, "diagnostics.txt"), h, "".join(line + "\n" for line in diag))
    print(f"{series.n} days {missing['first_year']}-{missing['last_year']}; missing precip "
          f"{missing['precip_missing_fraction']:.3%}, temp {missing['temp_missing_fraction']:.3%}; "
          f"{len(diag)} rejected rows")
    return EXIT_OK


def cmd_trend(cfg: dict) -> int:
    c = cfg["trend"]
    series = _read_series(cfg)
    yearly = trends.yearly_means(series, c["min_days"])
    if yearly.n < 6:
        raise UserError(f"trend test needs at least 6 complete years, got {yearly.n}")
    res = trends.lrt_trend_test(yearly, c["alpha"], c["force"])
    h = header(cfg, "trend")
    site = cfg["site"] or series.station_id or "site"
    _out(cfg, "trend.csv").write_text(
        trends.format_trend_report(site, res, _header_lines(h)), encoding="utf-8")
    form = trends.trend_form_of(res)
    _write_json(_out(cfg, "site_profile.json"), h,
                {"site": site, "trend": form.kind.value, "breakpoint": form.breakpoint,
                 "forced": res.forced})
    tau = "" if res.breakpoint is None else f", tau={res.breakpoint:g}"
    print(f"{site}: {res.chosen_form}{tau} ({'forced' if res.forced else 'test'}), "
          f"LRT={res.lrt_statistic:.3f}, p={res.p_value:.3g}")
    return EXIT_OK


def _trend_form(cfg: dict) -> TrendForm:
    t = cfg["model"]["trend"]
    if isinstance(t, dict) and "piecewise" in t:
        return TrendForm.piecewise(float(t["piecewise"]))
    if t == "auto":
        prof = _out(cfg, "site_profile.json")
        if not prof.is_file():
            log.warning("no site profile; using a linear trend")
            return TrendForm.linear()
        d = json.loads(prof.read_text(encoding="utf-8"))
        return TrendForm(d["trend"], d.get("breakpoint"))
    if t in ("linear", "constant"):
        return TrendForm(t)
    raise UserError(f"model.trend must be auto, linear, constant or {{'piecewise': year}}, got {t!r}")


def model_specs(cfg: dict) -> list:
    m = cfg["model"]
    Ks = m["K"] if isinstance(m["K"], list) else [m["K"]]
    form = _trend_form(cfg)
    try:
        return [ModelSpec(int(K), int(m["M"]), int(m["M1"]), int(m["d"]), int(m["T"]), form)
                for K in Ks]
    except (InvalidParameterError, ValueError) as exc:
        raise UserError(f"invalid model configuration: {exc}") from None


def em_config(cfg: dict) -> inference.EMConfig:
    e = cfg["em"]
    try:
        return inference.EMConfig(max_iters=int(e["max_iters"]), rel_tol=float(e["rel_tol"]),
                                  n_restarts=int(e["n_restarts"]), rng_seed=int(cfg["seed"]),
                                  mstep_max_evals=int(e["mstep_max_evals"]),
                                  variance_floor=float(e["variance_floor"]),
                                  threads=int(cfg["threads"]))
    except ValueError as exc:
        raise UserError(str(exc)) from None


def cmd_fit(cfg: dict) -> int:
    series = _read_series(cfg)
    specs = model_specs(cfg)
    try:
        best, rows = inference.select_K(series, specs, em_config(cfg))
    except inference.InsufficientDataError as exc:
        raise UserError(str(exc)) from None
    h = header(cfg, "fit")
    save_model(_out(cfg, "model.json"), best, h)
    table = [(r.K, r.loglik, r.n_params, r.bic, "yes" if r.K == best.spec.K else "", r.error)
             for r in rows]
    _write_text(_out(cfg, "selection.csv"), h,
                _csv(["K", "loglik", "n_params", "bic", "selected", "error"], table))
    n_bad = sum(1 for d in best.restart_diagnostics if not d.get("converged", False))
    _write_json(_out(cfg, "fit_diagnostics.json"), h,
                {"K": best.spec.K, "restarts": best.restart_diagnostics,
                 "not_converged": n_bad, "best_converged": best.converged})
    for r in rows:
        print(f"K={r.K}: loglik={r.loglik:.3f} n_params={r.n_params} BIC={r.bic:.3f}"
              + (f" FAILED {r.error}" if r.error else ""))
    if n_bad:
        print(f"warning: {n_bad} restart(s) did not converge", file=sys.stderr)
    print(f"selected K={best.spec.K}")
    return EXIT_OK


def _load_model(cfg: dict):
    path = _out(cfg, "model.json")
    if not path.is_file():
        raise UserError(f"model file not found: {path} (run 'fit' first)")
    try:
        return load_model(path)
    except (KeyError, ValueError) as exc:
        raise data_io.DataFormatError(f"{path}: {exc}") from None


def _observed_length(cfg: dict, model) -> int:
    path = _out(cfg, "series.csv")
    return data_io.read_series(path).n if path.is_file() else model.n_obs


def simulation_request(cfg: dict, n_obs: int) -> sim.SimulationRequest:
    s = cfg["simulate"]
    rule = s["initial_state"]
    if rule == "stationary":
        rule = sim.StationaryOfQ1()
    elif isinstance(rule, int):
        rule = sim.Fixed(rule - 1)
    else:
        raise UserError("simulate.initial_state must be 'stationary' or a 1-based state")
    return sim.SimulationRequest(int(s["n_days"] or n_obs), int(s["n_trajectories"]),
                                 int(cfg["seed"]), rule, bool(s["emit_states"]))


def cmd_simulate(cfg: dict) -> int:
    model = _load_model(cfg)
    req = simulation_request(cfg, _observed_length(cfg, model))
    trajs = sim.simulate(model, req)
    h = header(cfg, "simulate")
    fmt = cfg["simulate"]["format"]
    if fmt == "npz":
        sim.write_batch(_out(cfg, "batch.npz"), trajs, req, model, model.calendar.first_year, h)
    elif fmt == "csv":
        h.update(n_days=req.n_days, n_trajectories=req.n_trajectories,
                 model_hash=sim.model_hash(model))
        sim.write_trajectories_csv(_out(cfg, "trajectories.csv"), trajs, h)
    else:
        raise UserError("simulate.format must be 'npz' or 'csv'")
    print(f"{req.n_trajectories} trajectories of {req.n_days} days")
    return EXIT_OK


def report_config(cfg: dict, first_year: int) -> validate.ReportConfig:
    v = cfg["validate"]
    grid = None if v["y_grid"] is None else np.asarray(v["y_grid"], dtype=float)
    return validate.ReportConfig(
        hot_quantiles=tuple(v["hot_quantiles"]), cold_quantiles=tuple(v["cold_quantiles"]),
        cluster_max_length=int(v["cluster_max_length"]), spell_max_length=int(v["spell_max_length"]),
        kernel_h=float(v["kernel_h"]), seasonal_h1=float(v["seasonal_h1"]),
        seasonal_h2=float(v["seasonal_h2"]), seasonal_days=tuple(v["seasonal_days"]),
        y_grid=grid, first_year=first_year)


def _read_batch(cfg: dict):
    path = _out(cfg, "batch.npz")
    if not path.is_file():
        raise UserError(f"batch file not found: {path} (run 'simulate' with format npz first)")
    try:
        return sim.read_batch(path)
    except (KeyError, ValueError) as exc:
        raise data_io.DataFormatError(f"{path}: {exc}") from None


def cmd_validate(cfg: dict, statistics=None) -> int:
    series = _read_series(cfg)
    _, trajs = _read_batch(cfg)
    rc = report_config(cfg, series.first_year)
    names = statistics or cfg["validate"]["statistics"]
    try:
        reports = validate.build_report(series, trajs, names, rc)
    except KeyError as exc:
        raise UserError(str(exc)) from None
    except ValueError as exc:
        raise UserError(str(exc)) from None
    h = header(cfg, "validate")
    out_dir = _out(cfg, "validation")
    summary = validate.write_reports(out_dir, reports, _header_lines(h))
    for name, cov in summary.items():
        print(f"{name}: coverage {'NA' if cov is None else f'{cov:.3f}'}")
    failed = [r.name for r in reports if r.note]
    if failed:
        print(f"warning: statistics failed: {failed}", file=sys.stderr)
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    """State frequencies per day of year and fitted seasonal curves."""
    model = _load_model(cfg)
    spec, a = model.spec, model.params.stacked()
    n = _observed_length(cfg, model)
    marg = sim.state_marginals(model.params, spec, n)
    n_years = n // spec.T
    freq = marg[: n_years * spec.T].reshape(n_years, spec.T, spec.K).mean(axis=0)
    h = header(cfg, "report")
    out = _out(cfg, "report")
    out.mkdir(exist_ok=True)
    states = [f"state{k + 1}" for k in range(spec.K)]
    _write_text(out / "state_frequencies.csv", h,
                _csv(["day_of_year"] + states, [[t + 1, *freq[t]] for t in range(spec.T)]))
    t = np.arange(1, spec.T + 1)
    H = harmonic_design(t, spec.d, spec.T)
    season = H @ a["temp_season"].T
    scale = np.exp(H @ a["precip_season"].T)
    rows = [[int(tt), *season[i], *scale[i]] for i, tt in enumerate(t)]
    _write_text(out / "seasonal_curves.csv", h,
                _csv(["day_of_year"] + [f"S_{s}" for s in states] + [f"scale_{s}" for s in states],
                     rows))
    years = np.arange(model.calendar.first_year, model.calendar.first_year + max(n_years, 1))
    tt = (years - model.calendar.first_year) * spec.T + 1
    tr = trend_design(tt, spec.trend_form, model.calendar) @ a["trend"].T
    _write_text(out / "trend_curves.csv", h,
                _csv(["year"] + [f"T_{s}" for s in states], [[int(y), *tr[i]] for i, y in enumerate(years)]))
    rows = []
    for k in range(spec.K):
        rows.append([k + 1, a["weights"][k, :spec.M1].sum(), *a["weights"][k], *a["means"][k],
                     *a["variances"][k], *a["lambdas"][k]])
    cols = (["state", "dry_weight"] + [f"p{m + 1}" for m in range(spec.M)]
            + [f"mu{m + 1}" for m in range(spec.M)] + [f"var{m + 1}" for m in range(spec.M)]
            + [f"lambda{m + 1}" for m in range(spec.M1, spec.M)])
    _write_text(out / "parameters.csv", h, _csv(cols, rows))
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seasonal-hmm", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=tool_version())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration entry (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="parse ECA&D files into a series")
    p.add_argument("--precip", help="RR file")
    p.add_argument("--temp", help="TG file")
    p = sub.add_parser("trend", parents=[common], help="linear vs broken-line trend test")
    p.add_argument("--force", choices=["L", "PL"], help="override the test decision")
    p = sub.add_parser("fit", parents=[common], help="fit candidate models and select by BIC")
    p.add_argument("--K", type=int, nargs="+", help="candidate state counts")
    p = sub.add_parser("simulate", parents=[common], help="simulate trajectories")
    p.add_argument("--n-trajectories", type=int)
    p.add_argument("--emit-states", action="store_true", default=None)
    p = sub.add_parser("validate", parents=[common], help="validation statistics with bands")
    p.add_argument("--statistics", nargs="+", help="subset of statistic names")
    sub.add_parser("report", parents=[common], help="state frequencies and fitted curves")
    return ap


def _cli_overrides(args) -> list:
    o = list(args.set)
    for flag, key in (("out", "output_dir"), ("seed", "seed"), ("threads", "threads"),
                      ("precip", "ingest.precip_file"), ("temp", "ingest.temp_file"),
                      ("force", "trend.force"), ("K", "model.K"),
                      ("n_trajectories", "simulate.n_trajectories"),
                      ("emit_states", "simulate.emit_states")):
        val = getattr(args, flag, None)
        if val is not None:
            o.append(f"{key}={json.dumps(val)}")
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _cli_overrides(args))
        if args.command == "validate":
            return cmd_validate(cfg, args.statistics)
        return {"ingest": cmd_ingest, "trend": cmd_trend, "fit": cmd_fit,
                "simulate": cmd_simulate, "report": cmd_report}[args.command](cfg)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (trends.TrendDataError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except data_io.DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (inference.FitFailureError, inference.DegenerateLikelihoodError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
