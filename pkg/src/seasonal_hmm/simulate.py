"""Synthetic trajectories from a fitted model.

Every trajectory owns a random stream derived from ``(seed, index)``, so
trajectory ``i`` is the same whether one or a thousand are requested.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .model import Calendar, ModelSpec, Parameters, harmonic_design, period_transitions, trend_design

BATCH_FORMAT = "seasonal-hmm batch v1"


@dataclass(frozen=True)
class Fixed:
    state: int


class StationaryOfQ1:
    """Draw the first state from the stationary law of ``Q(1)``."""

    def __repr__(self):
        return "StationaryOfQ1()"


@dataclass(frozen=True)
class SimulationRequest:
    n_days: int
    n_trajectories: int = 1
    rng_seed: int = 0
    initial_state_rule: Union[Fixed, StationaryOfQ1] = StationaryOfQ1()
    emit_states: bool = False

    def __post_init__(self):
        if self.n_days < 1 or self.n_trajectories < 1:
            raise ValueError("n_days and n_trajectories must be positive")


@dataclass
class Trajectory:
    precip: np.ndarray
    temp: np.ndarray
    states: Optional[np.ndarray] = None
    components: Optional[np.ndarray] = None


def stationary_of(Q: np.ndarray) -> np.ndarray:
    """Left eigenvector of ``Q`` for eigenvalue one, normalised to sum one."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("transition matrix must be square")
    if np.any(Q < 0) or not np.allclose(Q.sum(axis=1), 1.0, atol=1e-10, rtol=0):
        raise ValueError("not a stochastic matrix")
    K = Q.shape[0]
    A = np.vstack([Q.T - np.eye(K), np.ones((1, K))])
    rhs = np.zeros(K + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    # one refinement pass tightens the balance equations to round-off
    pi = pi + np.linalg.lstsq(A, rhs - A @ pi, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def state_marginals(params: Parameters, spec: ModelSpec, n_days: int) -> np.ndarray:
    """``P(X_t = k)`` for ``t = 1..n_days`` starting from the initial distribution."""
    Q = period_transitions(params, spec)
    out = np.empty((n_days, spec.K))
    p = np.array(params.initial_dist, dtype=float)
    for t in range(n_days):
        out[t] = p
        p = p @ Q[t % spec.T]
        p /= p.sum()
    return out


def _initial_distribution(params, spec, rule) -> np.ndarray:
    if isinstance(rule, Fixed):
        if not 0 <= rule.state < spec.K:
            raise ValueError(f"initial state {rule.state} out of range")
        p = np.zeros(spec.K)
        p[rule.state] = 1.0
        return p
    return stationary_of(period_transitions(params, spec)[0])


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _day_tables(params: Parameters, spec: ModelSpec, calendar: Calendar, n_days: int):
    t = np.arange(1, n_days + 1)
    a = params.stacked()
    H = harmonic_design(t, spec.d, spec.T)
    X = trend_design(t, spec.trend_form, calendar)
    loc = X @ a["trend"].T + H @ a["temp_season"].T  # (n, K)
    scale = np.exp(H @ a["precip_season"].T)  # 1 + sigma_k(t)
    return a, loc, scale


def simulate(model, req: SimulationRequest, trajectory_indices: Optional[Sequence[int]] = None,
             chunk: int = 64) -> list:
    """Draw ``req.n_trajectories`` trajectories (or the listed indices).

    States follow ``Q(t)``; each day a mixture component is drawn from the
    state's weights, temperature from its Gaussian and precipitation is zero
    for the first ``M1`` components, exponential otherwise.
    """
    spec, params = model.spec, model.params
    n = req.n_days
    a, loc, scale = _day_tables(params, spec, model.calendar, n)
    cumQ = np.cumsum(period_transitions(params, spec), axis=2)
    cumQ[:, :, -1] = 1.0
    cumP = np.cumsum(a["weights"], axis=1)
    cumP[:, -1] = 1.0
    sd = np.sqrt(a["variances"])
    M1 = spec.M1
    rates = np.concatenate([np.ones((spec.K, M1)), a["lambdas"]], axis=1)
    p0 = np.cumsum(_initial_distribution(params, spec, req.initial_state_rule))
    p0[-1] = 1.0

    indices = list(range(req.n_trajectories)) if trajectory_indices is None else list(trajectory_indices)
    out = []
    for lo in range(0, len(indices), chunk):
        idx = indices[lo:lo + chunk]
        B = len(idx)
        draws = np.empty((4, B, n))
        for b, i in enumerate(idx):
            rng = trajectory_rng(req.rng_seed, i)
            draws[0, b] = rng.random(n)
            draws[1, b] = rng.random(n)
            draws[2, b] = rng.standard_normal(n)
            draws[3, b] = rng.standard_exponential(n)
        states = np.empty((B, n), dtype=np.int64)
        s = np.searchsorted(p0, draws[0, :, 0], side="right")
        states[:, 0] = s
        for t in range(1, n):
            rows = cumQ[(t - 1) % spec.T][s]
            s = (draws[0, :, t][:, None] >= rows).sum(axis=1)
            np.minimum(s, spec.K - 1, out=s)
            states[:, t] = s
        comps = (draws[1][:, :, None] >= cumP[states]).sum(axis=2)
        np.minimum(comps, spec.M - 1, out=comps)
        day = np.arange(n)[None, :]
        temp = loc[day, states] + a["means"][states, comps] + sd[states, comps] * draws[2]
        precip = np.where(comps < M1, 0.0,
                          draws[3] * scale[day, states] / rates[states, comps])
        for b in range(B):
            out.append(Trajectory(precip[b], temp[b],
                                  states[b] if req.emit_states else None,
                                  comps[b] if req.emit_states else None))
    return out


# ---------------------------------------------------------------------------
# batch files


def model_hash(model) -> str:
    from .persistence import model_to_dict

    blob = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_batch(path, trajectories: Sequence[Trajectory], req: SimulationRequest,
                model, first_year: int, extra_header: Optional[dict] = None) -> None:
    """Write a compressed ``.npz`` batch with a JSON header."""
    header = {"format": BATCH_FORMAT, "n_days": req.n_days,
              "n_trajectories": len(trajectories), "seed": req.rng_seed,
              "model_hash": model_hash(model), "first_year": first_year,
              "has_states": trajectories[0].states is not None}
    header.update(extra_header or {})
    arrays = {"precip": np.stack([t.precip for t in trajectories]),
              "temp": np.stack([t.temp for t in trajectories])}
    if header["has_states"]:
        arrays["states"] = np.stack([t.states for t in trajectories]).astype(np.int16)
        arrays["components"] = np.stack([t.components for t in trajectories]).astype(np.int16)
    buf = io.BytesIO()
    np.savez_compressed(buf, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_batch(path):
    """Returns ``(header, list of Trajectory)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != BATCH_FORMAT:
            raise ValueError(f"{path}: not a trajectory batch")
        P, X = z["precip"], z["temp"]
        S = z["states"] if "states" in z else None
        C = z["components"] if "components" in z else None
    trajs = [Trajectory(P[i], X[i], None if S is None else S[i].astype(np.int64),
                        None if C is None else C[i].astype(np.int64)) for i in range(P.shape[0])]
    return header, trajs


def write_trajectories_csv(path, trajectories: Sequence[Trajectory], header: dict) -> None:
    lines = [f"# {k}: {v}" for k, v in header.items()]
    has_states = trajectories[0].states is not None
    lines.append("trajectory,t,precip,temp" + (",state,component" if has_states else ""))
    for i, tr in enumerate(trajectories):
        for t in range(tr.precip.size):
            row = f"{i},{t + 1},{float(tr.precip[t])!r},{float(tr.temp[t])!r}"
            if has_states:
                row += f",{tr.states[t] + 1},{tr.components[t] + 1}"
            lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
