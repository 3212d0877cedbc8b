"""Shock-equipped mortality scenarios.

Each path combines simulated period effects, one regime chain per age
group and the matching shock panel, then rolls the log force of mortality
forward from the anchor year:

``log mu_t = log mu_{t-1} + A + B' K_t + beta' kappa_t + s_t``.

Shocks inside a high-volatility run sum to zero age by age, so a completed
run leaves no trace on later years.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baseline import BaselineParams
from .dynamics import PeriodDynParams, _factor
from .errors import NumericalError, ValidationError
from .regime import HVS, HVS_ENTRY, LVS, RegimeParams, residual_volatility

MAGIC = b"MSHOCK01"
_HEADER = struct.Struct("<8s3Q2q")
QUANTILES = (0.005, 0.05, 0.5, 0.95, 0.995)
BLOCK_SIZE = 1000
_STATE_NAMES = {"LVS": LVS, "HVS": HVS}


@dataclass(frozen=True)
class GroupShockModel:
    """Regime model of one age group plus its projection settings.

    Parameters
    ----------
    age_range : inclusive (first, last) ages covered by ``params.loading``.
    init_probs : filtered probabilities over (LVS, HVS entry, HVS) at the
        last calibration year.
    forced_states : year -> ``"LVS"`` or ``"HVS"``.
    carry_in : summed residual vectors of a high-volatility run still open at
        the last calibration year; its remaining years offset this sum.
    """

    age_range: tuple[int, int]
    params: RegimeParams
    init_probs: np.ndarray
    forced_states: Mapping[int, str] = field(default_factory=dict)
    carry_in: np.ndarray | None = None


@dataclass
class ScenarioSet:
    """Simulated force of mortality over (path, age, year)."""

    ages: np.ndarray
    years: np.ndarray
    mu: np.ndarray  # (n_paths, n_ages, n_years)
    states: dict = field(default_factory=dict)  # group label -> (n_paths, n_years) int8
    truncated: dict = field(default_factory=dict)  # group label -> (n_paths,) bool
    metadata: dict = field(default_factory=dict)

    @property
    def q(self) -> np.ndarray:
        return -np.expm1(-self.mu)

    @property
    def n_paths(self) -> int:
        return self.mu.shape[0]


# ---------------------------------------------------------------------------
# regime chains


def _parse_state(value) -> int:
    key = str(value).upper()
    if key not in _STATE_NAMES:
        raise ValidationError(f"forced state must be LVS or HVS, got {value!r}")
    return _STATE_NAMES[key]


def start_state(init_probs) -> int:
    """Most probable state at the last calibration year (ties toward LVS)."""
    p = np.asarray(init_probs, dtype=float)
    if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-8:
        raise ValidationError("initial probabilities must be a distribution over three states")
    return int(np.argmax(p))


def simulate_chain(
    params: RegimeParams,
    init_probs,
    years: Sequence[int],
    n_paths: int,
    forced_states: Mapping[int, str] | None = None,
    seed: int | np.random.Generator = 0,
) -> np.ndarray:
    """Regime paths over ``years`` for ``n_paths`` independent paths.

    Returns an int8 array (n_paths, n_years). A forced ``"HVS"`` year
    becomes the entry state after a low-volatility year and the
    continuation state otherwise, so the next year keeps the memory rule.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    years = np.asarray(years)
    forced = {int(y): _parse_state(s) for y, s in (forced_states or {}).items()}
    prev = np.full(n_paths, start_state(init_probs), dtype=np.int8)
    out = np.empty((n_paths, years.size), dtype=np.int8)
    u = rng.random((n_paths, years.size))
    for t, year in enumerate(years):
        nxt = np.where(
            prev == LVS,
            np.where(u[:, t] < params.p12, HVS_ENTRY, LVS),
            np.where(prev == HVS_ENTRY, HVS, np.where(u[:, t] < params.p21, LVS, HVS)),
        ).astype(np.int8)
        if int(year) in forced:
            if forced[int(year)] == LVS:
                nxt[:] = LVS
            else:
                nxt = np.where(prev == LVS, HVS_ENTRY, HVS).astype(np.int8)
        out[:, t] = nxt
        prev = nxt
    return out


def hvs_runs(states: np.ndarray) -> list[tuple[int, int]]:
    """Maximal high-volatility runs ``(first, last)`` of one path, by index."""
    runs: list[tuple[int, int]] = []
    for t, s in enumerate(np.asarray(states)):
        if s == LVS:
            continue
        if s == HVS and runs and runs[-1][1] == t - 1:
            runs[-1] = (runs[-1][0], t)
        else:
            runs.append((t, t))
    return runs


# ---------------------------------------------------------------------------
# shock panels


def simulate_shock_panel(
    states: np.ndarray,
    params: RegimeParams,
    ages: Sequence[int],
    years: Sequence[int],
    seed: int | np.random.Generator = 0,
    shock_mean: float = 0.0,
    carry_in=None,
    start: int = LVS,
) -> tuple[np.ndarray, np.ndarray]:
    """Offset-constrained shock vectors for a batch of regime paths.

    Parameters
    ----------
    states : (n_paths, n_years) regime paths.
    shock_mean : mean of the common shock factor (0 by default).
    carry_in : per-age residual sum of a run open at the calibration end;
        used when ``start`` is a high-volatility state and the first
        projected year continues that run. Without it such a run is
        treated as a fresh one.

    Returns
    -------
    shocks : (n_paths, n_ages, n_years); zero in low-volatility years. Every
        completed run sums to zero per age and starts with its vector of
        highest age average. The open run continuing from history instead
        sums to ``-carry_in`` and keeps its chronological order.
    truncated : (n_paths,) flags for a one-year run cut by the horizon, whose
        offsetting vector falls outside the horizon and is dropped.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    states = np.asarray(states)
    n_paths, H = states.shape
    ages = np.asarray(ages)
    b = np.asarray(params.loading, dtype=float)
    if b.size != ages.size:
        raise ValidationError("loading length does not match the age group")
    # projection years all sit in the late volatility epoch
    sd = residual_volatility(ages, np.asarray([max(int(years[0]), params.epoch_year)]), params)[:, 0]
    factor = shock_mean + params.shock_sd * rng.standard_normal((n_paths, H))
    draws = factor[:, None, :] * b[None, :, None] + sd[:, None] * rng.standard_normal((n_paths, ages.size, H))

    in_run = states != LVS
    # a run ends at t when t is high-volatility and t+1 does not continue it
    cont_next = np.zeros_like(in_run)
    cont_next[:, :-1] = states[:, 1:] == HVS
    ends = in_run & ~cont_next
    begins = in_run & (states == HVS_ENTRY)
    begins[:, 0] = in_run[:, 0]
    carried = np.zeros(n_paths, dtype=bool)
    if start != LVS and carry_in is not None:
        carried = states[:, 0] == HVS

    shocks = np.zeros((n_paths, ages.size, H))
    running = np.zeros((n_paths, ages.size))
    if carry_in is not None:
        carry = np.asarray(carry_in, dtype=float)
        if carry.shape != (ages.size,):
            raise ValidationError("carry-in vector does not match the age group")
        running[carried] = carry
    run_start = np.zeros(n_paths, dtype=int)
    run_len = np.zeros(n_paths, dtype=int)
    best_avg = np.full(n_paths, -np.inf)
    best_idx = np.zeros(n_paths, dtype=int)
    in_carried = carried.copy()
    truncated = np.zeros(n_paths, dtype=bool)
    rows = np.arange(n_paths)
    for t in range(H):
        new = begins[:, t] & ~(carried & (t == 0))
        run_start[new] = t
        run_len[new] = 0
        best_avg[new] = -np.inf
        in_carried[new] = False
        if t == 0:
            run_len[carried] = 0
        active = in_run[:, t]
        run_len[active] += 1
        last = ends[:, t]
        cut = last & (t == H - 1) & (run_len == 1) & ~in_carried
        closing = last & ~cut
        draw_here = active & ~closing
        vec = np.where(closing[:, None], -running, draws[:, :, t])
        vec[~active] = 0.0
        shocks[:, :, t] = vec
        running[draw_here] += draws[draw_here, :, t]
        truncated |= cut
        avg = vec.mean(axis=1)
        better = active & (avg > best_avg)
        best_avg[better] = avg[better]
        best_idx[better] = t
        # move the highest-average vector to the front of each completed run
        swap = last & ~in_carried & (best_idx != run_start)
        if swap.any():
            p = rows[swap]
            a, c = run_start[swap], best_idx[swap]
            first = shocks[p, :, a].copy()
            shocks[p, :, a] = shocks[p, :, c]
            shocks[p, :, c] = first
        running[last] = 0.0
        in_carried[last] = False
    return shocks, truncated


# ---------------------------------------------------------------------------
# scenario generation


def _block_streams(seed: int, block: int, n_groups: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence([int(seed), int(block)])
    return [np.random.default_rng(s) for s in ss.spawn(1 + 2 * n_groups)]


def project_scenarios(
    baseline: BaselineParams,
    dyn: PeriodDynParams,
    groups: Sequence[GroupShockModel],
    anchor_log_mu,
    horizon: int,
    n_paths: int = 10_000,
    seed: int = 0,
    shock_mean: str | float = "zero",
    innovations: bool = True,
    shocks: bool = True,
    threads: int = 1,
) -> ScenarioSet:
    """Simulate ``n_paths`` mortality surfaces over ``horizon`` years.

    Paths are split into fixed blocks of ``BLOCK_SIZE`` with their own random
    streams keyed by ``(seed, block)``, so the result does not depend on
    ``threads``.

    Parameters
    ----------
    anchor_log_mu : log crude death rates of the target country in the last
        calibration year.
    shock_mean : ``"zero"``, ``"calibrated"`` or a number.
    innovations, shocks : switch off period-effect noise or regime shocks;
        both off gives the best-estimate surface.
    """
    ages = np.asarray(baseline.ages)
    t_max = int(baseline.years[-1])
    years = np.arange(t_max + 1, t_max + 1 + int(horizon))
    anchor = np.asarray(anchor_log_mu, dtype=float)
    if horizon < 1 or n_paths < 1:
        raise ValidationError("horizon and n_paths must be positive")
    if anchor.shape != ages.shape or not np.isfinite(anchor).all():
        raise ValidationError("anchor must hold a finite log rate for every age (positive crude rates)")
    m, l = baseline.common.m, baseline.deviation.l
    if dyn.dim != m + l:
        raise ValidationError(f"period dynamics have dimension {dyn.dim}, expected {m + l}")
    loadings = np.vstack([baseline.common.B, baseline.deviation.beta])  # (d, n_ages)
    A = baseline.common.A
    F = _factor(dyn.cov)
    slices = []
    for g in groups:
        lo, hi = g.age_range
        sel = np.where((ages >= lo) & (ages <= hi))[0]
        if sel.size != np.asarray(g.params.loading).size:
            raise ValidationError(f"age group {lo}-{hi} does not match its loading")
        slices.append(sel)
    labels = [f"{g.age_range[0]}-{g.age_range[1]}" for g in groups]

    def run_block(block: int):
        first = block * BLOCK_SIZE
        n = min(BLOCK_SIZE, n_paths - first)
        streams = _block_streams(seed, block, len(groups))
        if innovations:
            e = streams[0].standard_normal((n, years.size, dyn.dim))
            periods = dyn.drift + e @ F.T
        else:
            periods = np.broadcast_to(dyn.drift, (n, years.size, dyn.dim))
        step = A[None, :, None] + np.einsum("da,ntd->nat", loadings, periods)
        block_states, block_trunc = {}, {}
        for k, g in enumerate(groups):
            chain = simulate_chain(g.params, g.init_probs, years, n, g.forced_states, streams[1 + 2 * k])
            block_states[labels[k]] = chain
            if not shocks:
                block_trunc[labels[k]] = np.zeros(n, dtype=bool)
                continue
            mean = _shock_mean(shock_mean, g.params)
            s, trunc = simulate_shock_panel(
                chain, g.params, ages[slices[k]], years, streams[2 + 2 * k], mean,
                g.carry_in, start_state(g.init_probs),
            )
            step[:, slices[k], :] += s
            block_trunc[labels[k]] = trunc
        log_mu = anchor[None, :, None] + np.cumsum(step, axis=2)
        return log_mu, block_states, block_trunc

    n_blocks = -(-n_paths // BLOCK_SIZE)
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_block, range(n_blocks)))
    else:
        parts = [run_block(b) for b in range(n_blocks)]
    log_mu = np.concatenate([p[0] for p in parts], axis=0)
    bad = ~np.isfinite(log_mu)
    if bad.any():
        i, x, t = np.argwhere(bad)[0]
        raise NumericalError(f"non-finite force of mortality at age {ages[x]}, year {years[t]}, path {i}")
    with np.errstate(over="ignore", under="ignore"):
        mu = np.exp(log_mu)  # overflow and underflow are reported below
    if np.any(mu <= 0) or not np.isfinite(mu).all():
        i, x, t = np.argwhere(~(np.isfinite(mu) & (mu > 0)))[0]
        raise NumericalError(f"force of mortality out of range at age {ages[x]}, year {years[t]}, path {i}")
    states = {lab: np.concatenate([p[1][lab] for p in parts]) for lab in labels}
    truncated = {lab: np.concatenate([p[2][lab] for p in parts]) for lab in labels}
    meta = {
        "seed": int(seed),
        "n_paths": int(n_paths),
        "horizon": int(horizon),
        "shock_mean": shock_mean,
        "innovations": bool(innovations),
        "shocks": bool(shocks),
        "truncated_paths": {lab: int(v.sum()) for lab, v in truncated.items()},
    }
    return ScenarioSet(ages.copy(), years, mu, states, truncated, meta)


def _shock_mean(mode, params: RegimeParams) -> float:
    if mode == "zero":
        return 0.0
    if mode == "calibrated":
        return float(params.shock_mean)
    try:
        return float(mode)
    except (TypeError, ValueError):
        raise ValidationError(f"unknown shock mean setting {mode!r}") from None


def open_run_carry_in(residuals: np.ndarray, filtered_probs: np.ndarray) -> np.ndarray | None:
    """Summed residuals of the high-volatility run still open at the last year.

    The run is read off the most probable filtered state per year; returns
    ``None`` when the last year is most likely low volatility.
    """
    z = np.asarray(residuals, dtype=float)
    states = np.argmax(np.asarray(filtered_probs), axis=1)
    if states[-1] == LVS:
        return None
    t = states.size - 1
    while t > 0 and states[t] == HVS and states[t - 1] != LVS:
        t -= 1
    return z[:, t:].sum(axis=1)


# ---------------------------------------------------------------------------
# storage and export


def save_scenarios(sset: ScenarioSet, path: str | Path) -> Path:
    """Binary store: header, then float64 force of mortality in C order.

    Header (little endian): 8-byte magic ``MSHOCK01``, three uint64
    dimensions (paths, ages, years) and two int64 values (first age, first
    year). Ages and years are consecutive integers. Metadata goes to a JSON
    sidecar and the regime paths to an int8 ``.states.npy`` array of shape
    (groups, paths, years), groups in the order listed in the sidecar.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, a, y = sset.mu.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, a, y, int(sset.ages[0]), int(sset.years[0])))
        fh.write(np.ascontiguousarray(sset.mu, dtype="<f8").tobytes())
    sidecar = dict(sset.metadata)
    sidecar["sha256"] = hashlib.sha256(path.read_bytes()).hexdigest()
    if sset.states:
        labels = sorted(sset.states)
        sidecar["state_groups"] = labels
        np.save(path.with_suffix(".states.npy"), np.stack([sset.states[k] for k in labels]).astype(np.int8))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_scenarios(path: str | Path) -> ScenarioSet:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"scenario file {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path} is too short to be a scenario store")
    magic, n, a, y, age0, year0 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"{path} is not a scenario store")
    expected = _HEADER.size + 8 * n * a * y
    if len(raw) != expected:
        raise ValidationError(f"{path} has {len(raw)} bytes, expected {expected}")
    mu = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, a, y).astype(float)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return ScenarioSet(np.arange(age0, age0 + a), np.arange(year0, year0 + y), mu, {}, {}, meta)


def scenario_quantiles(sset: ScenarioSet, probs: Sequence[float] = QUANTILES) -> np.ndarray:
    """Per (age, year) quantiles of ``q`` across paths, shape (len(probs), ages, years)."""
    if sset.n_paths == 0:
        raise ValidationError("scenario set is empty")
    return np.quantile(sset.q, probs, axis=0)


def _fmt(v: float) -> str:
    return repr(float(v))


def quantile_summary_csv(sset: ScenarioSet, probs: Sequence[float] = QUANTILES) -> str:
    qs = scenario_quantiles(sset, probs)
    buf = io.StringIO()
    buf.write("age,year," + ",".join(f"q{p:g}" for p in probs) + "\n")
    for i, age in enumerate(sset.ages):
        for j, year in enumerate(sset.years):
            buf.write(f"{int(age)},{int(year)}," + ",".join(_fmt(v) for v in qs[:, i, j]) + "\n")
    return buf.getvalue()


def paths_csv(sset: ScenarioSet) -> str:
    """One row per (age, year), one ``q`` column per path."""
    if sset.n_paths == 0:
        raise ValidationError("scenario set is empty")
    q = sset.q
    buf = io.StringIO()
    buf.write("age,year," + ",".join(f"path{i + 1}" for i in range(sset.n_paths)) + "\n")
    for i, age in enumerate(sset.ages):
        for j, year in enumerate(sset.years):
            buf.write(f"{int(age)},{int(year)}," + ",".join(_fmt(v) for v in q[:, i, j]) + "\n")
    return buf.getvalue()


def export_scenarios(path: str | Path, fmt: str, out: str | Path | None = None) -> Path:
    """Write ``csv`` or ``quantile-summary`` next to the store (or to ``out``)."""
    writers = {"csv": (paths_csv, ".paths.csv"), "quantile-summary": (quantile_summary_csv, ".quantiles.csv")}
    if fmt not in writers:
        raise ValidationError(f"unknown export format {fmt!r}; use csv or quantile-summary")
    sset = load_scenarios(path)
    writer, suffix = writers[fmt]
    target = Path(out) if out is not None else Path(path).with_suffix(suffix)
    target.write_text(writer(sset), encoding="utf-8")
    return target
