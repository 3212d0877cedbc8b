"""Regime-switching shock model for baseline residuals.

A three-state Markov chain drives the residual vector of an age group:

* state 0, ``LVS``: low volatility, ``z ~ N(0, diag(s^2))``;
* state 1, ``HVS_ENTRY``: first high-volatility year;
* state 2, ``HVS``: later high-volatility years.

Both high-volatility states emit ``N(loading * shock_mean,
shock_sd^2 loading loading' + diag(s^2))``. The entry state always moves
to state 2, so every high-volatility spell lasts at least two years. The
idiosyncratic standard deviation ``s`` is linear in age and switches law
at ``epoch_year``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import BaselineParams
from .data import MortalityPanel
from .errors import NumericalError, ValidationError
from .jde import jde_minimize

log = logging.getLogger(__name__)

LVS, HVS_ENTRY, HVS = 0, 1, 2
_LOG_2PI = np.log(2.0 * np.pi)

# search box for (p12, p21, sd1, slope1, sd2, slope2, shock_mean, shock_sd)
THETA1_LOWER = np.array([1e-4, 1e-4, 1e-4, -0.02, 1e-4, -0.02, -1.0, 1e-3])
THETA1_UPPER = np.array([0.999, 0.999, 5.0, 0.02, 5.0, 0.02, 1.0, 10.0])


@dataclass(frozen=True)
class ResidualPanel:
    ages: np.ndarray
    years: np.ndarray  # first improvement year onwards
    z: np.ndarray  # (n_ages, n_years)
    age_groups: tuple[tuple[int, int], ...] = ()

    def group(self, lo: int, hi: int) -> "ResidualPanel":
        keep = (self.ages >= lo) & (self.ages <= hi)
        if not keep.any():
            raise ValidationError(f"age group {lo}-{hi} is empty")
        return ResidualPanel(self.ages[keep], self.years, self.z[keep], ((lo, hi),))


@dataclass(frozen=True)
class RegimeParams:
    p12: float
    p21: float
    noise_sd1: float
    noise_slope1: float
    noise_sd2: float
    noise_slope2: float
    shock_mean: float
    shock_sd: float
    loading: np.ndarray
    epoch_year: int = 1970
    age_min: int = 0

    def theta1(self) -> np.ndarray:
        return np.array([
            self.p12, self.p21, self.noise_sd1, self.noise_slope1,
            self.noise_sd2, self.noise_slope2, self.shock_mean, self.shock_sd,
        ])

    def with_theta1(self, theta) -> "RegimeParams":
        keys = ("p12", "p21", "noise_sd1", "noise_slope1", "noise_sd2", "noise_slope2", "shock_mean", "shock_sd")
        return replace(self, **{k: float(v) for k, v in zip(keys, theta)})


@dataclass(frozen=True)
class FilterOutput:
    loglik: float
    filtered_probs: np.ndarray  # (T, 3)
    log_densities: np.ndarray  # (T,) one-step predictive log densities


@dataclass(frozen=True)
class RegimeFit:
    params: RegimeParams
    loglik: float
    filter: FilterOutput
    rounds: int
    diagnostics: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------------------
# residuals


def compute_residuals(
    panel: MortalityPanel, baseline: BaselineParams, age_groups: Sequence[tuple[int, int]] = ()
) -> ResidualPanel:
    """Observed log improvement of the target country minus the fitted one."""
    series = panel.series(baseline.deviation.country_code)
    d, e = series.deaths, series.exposures
    bad = ~(d > 0) | ~(e > 0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValidationError(
            f"crude rate is zero or missing at (year={int(panel.years[j])}, age={int(panel.ages[i])})"
        )
    log_m = np.log(d / e)
    z = np.diff(log_m, axis=1) - baseline.improvement_predictor()
    if not np.isfinite(z).all():
        raise NumericalError("non-finite residuals")
    return ResidualPanel(panel.ages.copy(), panel.years[1:].copy(), z, tuple(tuple(g) for g in age_groups))


# ---------------------------------------------------------------------------
# model pieces


def residual_volatility(ages, years, params: RegimeParams) -> np.ndarray:
    """Idiosyncratic standard deviation per (age, year); raises if not positive."""
    ages = np.asarray(ages, dtype=float)
    years = np.asarray(years)
    offset = ages - params.age_min
    early = params.noise_sd1 + params.noise_slope1 * offset
    late = params.noise_sd2 + params.noise_slope2 * offset
    sd = np.where((years < params.epoch_year)[None, :], early[:, None], late[:, None])
    if np.any(sd <= 0):
        i, j = np.argwhere(sd <= 0)[0]
        raise ValidationError(
            f"non-positive residual volatility at age {ages[i]:g}, year {int(years[j])}"
        )
    return sd


def memory_transition_matrix(p12: float, p21: float) -> np.ndarray:
    """Row-stochastic transition matrix over (LVS, HVS entry, HVS)."""
    for name, p in (("p12", p12), ("p21", p21)):
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"{name}={p} is not a probability")
    return np.array([
        [1.0 - p12, p12, 0.0],
        [0.0, 0.0, 1.0],
        [p21, 0.0, 1.0 - p21],
    ])


def stationary_distribution(p12: float, p21: float) -> np.ndarray:
    """Closed-form invariant distribution of the memory chain."""
    if not (0.0 < p12 < 1.0 and 0.0 < p21 < 1.0):
        raise ValidationError("transition probabilities must lie in (0, 1)")
    denom = p12 + p21 + p12 * p21
    return np.array([p21, p12 * p21, p12]) / denom


def emission_logdensity(z, hvs: bool, sd, params: RegimeParams) -> float:
    """Log density of one year's residual vector in a given regime.

    Uses the rank-one structure of the high-volatility covariance, so the
    cost is linear in the group size.
    """
    z = np.asarray(z, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if not (np.isfinite(z).all() and np.isfinite(sd).all()):
        raise ValidationError("non-finite input to the emission density")
    w = 1.0 / sd**2
    base = -0.5 * (z.size * _LOG_2PI + np.sum(np.log(sd**2)))
    if not hvs:
        return float(base - 0.5 * np.sum(w * z * z))
    b = np.asarray(params.loading, dtype=float)
    r = z - b * params.shock_mean
    s2 = params.shock_sd**2
    a = np.sum(w * b * b)
    c = np.sum(w * b * r)
    quad = np.sum(w * r * r) - s2 * c * c / (1.0 + s2 * a)
    return float(base - 0.5 * np.log1p(s2 * a) - 0.5 * quad)


def _log_emissions(z: np.ndarray, years: np.ndarray, ages: np.ndarray, batch: dict) -> tuple[np.ndarray, np.ndarray]:
    """Batched log emission densities.

    ``z`` is (T, n); ``batch`` holds arrays with leading population axis P.
    Returns (P, T) arrays for the low and high volatility states, or
    ``None`` entries where the volatility law is infeasible.
    """
    T, n = z.shape
    offset = ages - batch["age_min"]
    late_mask = years >= batch["epoch_year"]
    P = batch["p12"].shape[0]
    log_lvs = np.empty((P, T))
    log_hvs = np.empty((P, T))
    b = batch["loading"]  # (P, n)
    mu = batch["shock_mean"][:, None]
    s2 = (batch["shock_sd"] ** 2)[:, None]
    z2 = z * z
    for sd0, slope, cols in (
        (batch["noise_sd1"], batch["noise_slope1"], ~late_mask),
        (batch["noise_sd2"], batch["noise_slope2"], late_mask),
    ):
        if not cols.any():
            continue
        sd = sd0[:, None] + slope[:, None] * offset[None, :]  # (P, n)
        ok = np.all(sd > 0, axis=1)
        sd = np.where(ok[:, None], sd, 1.0)
        w = 1.0 / (sd * sd)
        logdet = np.sum(np.log(sd * sd), axis=1)[:, None]
        zz = z2[cols]  # (Tj, n)
        zc = z[cols]
        s_zz = w @ zz.T  # (P, Tj)
        s_bz = (w * b) @ zc.T
        a = np.sum(w * b * b, axis=1)[:, None]
        const = -0.5 * (n * _LOG_2PI + logdet)
        lvs = const - 0.5 * s_zz
        # quadratic form of r = z - b mu with the rank-one inverse
        s_rr = s_zz - 2.0 * mu * s_bz + mu * mu * a
        s_br = s_bz - mu * a
        quad = s_rr - s2 * s_br * s_br / (1.0 + s2 * a)
        hvs = const - 0.5 * np.log1p(s2 * a) - 0.5 * quad
        lvs[~ok] = -np.inf
        hvs[~ok] = -np.inf
        log_lvs[:, cols] = lvs
        log_hvs[:, cols] = hvs
    return log_lvs, log_hvs


def _forward(log_lvs, log_hvs, p12, p21, nu, keep_probs=False):
    """Hamilton recursion for a batch; returns (loglik (P,), probs, logdens)."""
    P, T = log_lvs.shape
    denom = p12 + p21 + p12 * p21
    a, b, c = p21 / denom, p12 * p21 / denom, p12 / denom
    total = np.zeros(P)
    probs = np.empty((P, T, 3)) if keep_probs else None
    logdens = np.empty((P, T)) if keep_probs else None
    q11, q22 = 1.0 - p12, 1.0 - p21
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        for t in range(T):
            if t > 0:
                a, b, c = a * q11 + c * p21, a * p12, b + c * q22
            m = np.maximum(log_lvs[:, t], log_hvs[:, t])
            m = np.where(np.isfinite(m), m, 0.0)
            el = np.exp(log_lvs[:, t] - m)
            eh = np.exp(log_hvs[:, t] - m)
            ua, ub, uc = a * el, b * eh, c * eh
            f = ua + ub + uc
            lf = np.log(f) + m
            total = total + nu[t] * lf
            a, b, c = ua / f, ub / f, uc / f
            if keep_probs:
                probs[:, t, 0], probs[:, t, 1], probs[:, t, 2] = a, b, c
                logdens[:, t] = lf
    total = np.where(np.isnan(total), -np.inf, total)
    return total, probs, logdens


def _as_batch(params: RegimeParams) -> dict:
    return {
        "p12": np.array([params.p12]),
        "p21": np.array([params.p21]),
        "noise_sd1": np.array([params.noise_sd1]),
        "noise_slope1": np.array([params.noise_slope1]),
        "noise_sd2": np.array([params.noise_sd2]),
        "noise_slope2": np.array([params.noise_slope2]),
        "shock_mean": np.array([params.shock_mean]),
        "shock_sd": np.array([params.shock_sd]),
        "loading": np.asarray(params.loading, dtype=float)[None, :],
        "epoch_year": params.epoch_year,
        "age_min": params.age_min,
    }


def filter_loglik(residuals: ResidualPanel, params: RegimeParams, nu=None) -> FilterOutput:
    """Weighted filter log-likelihood and filtered state probabilities.

    ``nu`` weights each year's predictive log density; a zero weight drops
    the year's term but the state probabilities still update through it.
    An infeasible volatility law or an impossible observation gives a
    log-likelihood of ``-inf`` rather than an exception.
    """
    z = residuals.z.T
    T = z.shape[0]
    nu = np.ones(T) if nu is None else np.asarray(nu, dtype=float)
    if nu.shape != (T,) or np.any(nu < 0):
        raise ValidationError("year weights must be non-negative, one per residual year")
    if np.asarray(params.loading).shape != (z.shape[1],):
        raise ValidationError("shock loading does not match the age group")
    if not np.isfinite(z).all():
        raise ValidationError("non-finite residuals")
    lv, hv = _log_emissions(z, residuals.years, residuals.ages.astype(float), _as_batch(params))
    ll, probs, logdens = _forward(lv, hv, np.array([params.p12]), np.array([params.p21]), nu, True)
    return FilterOutput(float(ll[0]), probs[0], logdens[0])


def batch_loglik(residuals: ResidualPanel, batch: dict, nu) -> np.ndarray:
    """Filter log-likelihood for a population of parameter vectors."""
    z = residuals.z.T
    lv, hv = _log_emissions(z, residuals.years, residuals.ages.astype(float), batch)
    ll, _, _ = _forward(lv, hv, batch["p12"], batch["p21"], np.asarray(nu, dtype=float))
    return ll


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class RegimeFitConfig:
    epoch_year: int = 1970
    seed: int = 0
    max_generations: int = 3000
    rel_tol: float = 1e-5
    max_rounds: int = 20
    jde_tol: float = 1e-10
    theta1_lower: tuple = tuple(THETA1_LOWER)
    theta1_upper: tuple = tuple(THETA1_UPPER)


def _theta1_batch(theta: np.ndarray, loading: np.ndarray, cfg: RegimeFitConfig, age_min: int) -> dict:
    P = theta.shape[0]
    return {
        "p12": theta[:, 0], "p21": theta[:, 1],
        "noise_sd1": theta[:, 2], "noise_slope1": theta[:, 3],
        "noise_sd2": theta[:, 4], "noise_slope2": theta[:, 5],
        "shock_mean": theta[:, 6], "shock_sd": theta[:, 7],
        "loading": np.broadcast_to(loading, (P, loading.size)),
        "epoch_year": cfg.epoch_year, "age_min": age_min,
    }


def _normalise_rows(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(raw, axis=1)
    ok = norms > 1e-12
    safe = np.where(ok, norms, 1.0)
    return raw / safe[:, None], ok


def _initial_theta1(res: ResidualPanel, cfg: RegimeFitConfig) -> np.ndarray:
    late = res.years >= cfg.epoch_year
    sd_all = float(np.std(res.z)) or 0.1
    sd1 = float(np.std(res.z[:, ~late])) if (~late).sum() > 1 else sd_all
    sd2 = float(np.std(res.z[:, late])) if late.sum() > 1 else sd_all
    theta = np.array([0.05, 0.5, sd1, 0.0, sd2, 0.0, 0.0, 3 * sd_all * np.sqrt(res.ages.size) / 2])
    return np.clip(theta, cfg.theta1_lower, cfg.theta1_upper)


def fit_regime(
    residuals: ResidualPanel,
    nu=None,
    config: RegimeFitConfig | None = None,
    initial: RegimeParams | None = None,
) -> RegimeFit:
    """Two-step maximum likelihood for one age group.

    Alternates a jDE search over the eight scalar parameters (loading
    fixed) with a jDE search over the loading direction (scalars fixed)
    until the log-likelihood changes by less than ``rel_tol`` relatively.
    """
    cfg = config or RegimeFitConfig()
    z = residuals.z
    n_ages, T = z.shape
    if T < 30:
        raise ValidationError(f"regime calibration needs at least 30 years of residuals, got {T}")
    nu = np.ones(T) if nu is None else np.asarray(nu, dtype=float)
    if nu.shape != (T,):
        raise ValidationError("year weights must have one entry per residual year")
    age_min = int(residuals.ages[0])
    rng = np.random.default_rng(cfg.seed)
    lo1, hi1 = np.asarray(cfg.theta1_lower, float), np.asarray(cfg.theta1_upper, float)

    if initial is None:
        loading = np.full(n_ages, 1.0 / np.sqrt(n_ages))
        theta = _initial_theta1(residuals, cfg)
    else:
        loading = np.asarray(initial.loading, dtype=float)
        theta = np.clip(initial.theta1(), lo1, hi1)

    def objective1(pop):
        return -batch_loglik(residuals, _theta1_batch(pop, loading, cfg, age_min), nu)

    def objective2(pop):
        dirs, ok = _normalise_rows(pop)
        P = pop.shape[0]
        batch = _theta1_batch(np.broadcast_to(theta, (P, 8)), loading, cfg, age_min)
        batch["loading"] = dirs
        out = -batch_loglik(residuals, batch, nu)
        out[~ok] = np.inf
        return out

    ll_prev = -np.inf
    history = []
    rounds = 0
    for rounds in range(1, cfg.max_rounds + 1):
        r1 = jde_minimize(objective1, lo1, hi1, max_generations=cfg.max_generations, seed=rng,
                          initial=theta[None], tol=cfg.jde_tol)
        if np.isfinite(r1.fun) and (r1.fun <= objective1(theta[None])[0]):
            theta = r1.x
        r2 = jde_minimize(objective2, -np.ones(n_ages), np.ones(n_ages), max_generations=cfg.max_generations,
                          seed=rng, initial=loading[None], tol=cfg.jde_tol)
        if np.isfinite(r2.fun) and r2.fun <= objective2(loading[None])[0]:
            loading = r2.x / np.linalg.norm(r2.x)
        ll = -float(objective1(theta[None])[0])
        history.append({"round": rounds, "loglik": ll, "gen1": r1.generations, "gen2": r2.generations})
        log.debug("regime round %d: loglik %.6f", rounds, ll)
        if not np.isfinite(ll):
            raise NumericalError(f"no feasible regime parameters found (best objective {r1.fun})")
        if np.isfinite(ll_prev) and abs(ll - ll_prev) <= cfg.rel_tol * abs(ll):
            break
        ll_prev = ll
    params = RegimeParams(*[float(v) for v in theta], loading=loading, epoch_year=cfg.epoch_year, age_min=age_min)
    params = canonical_sign(params)
    out = filter_loglik(residuals, params, nu)
    return RegimeFit(params, out.loglik, out, rounds, {"history": history})


def canonical_sign(params: RegimeParams) -> RegimeParams:
    """Flip (loading, shock mean) jointly so that the loading sums to >= 0."""
    b = np.asarray(params.loading, dtype=float)
    b = b / np.linalg.norm(b)
    if b.sum() < 0:
        return replace(params, loading=-b, shock_mean=-params.shock_mean)
    return replace(params, loading=b)


def year_weights(years, weight_map: dict | None) -> np.ndarray:
    """Expand ``{"1914-1919": 0.0, "1940": 0.5}`` style maps to per-year weights."""
    years = np.asarray(years)
    nu = np.ones(years.size)
    for key, w in (weight_map or {}).items():
        text = str(key)
        if "-" in text:
            a, b = (int(v) for v in text.split("-"))
        else:
            a = b = int(text)
        if w < 0:
            raise ValidationError("year weights must be non-negative")
        nu[(years >= a) & (years <= b)] = float(w)
    return nu


# ---------------------------------------------------------------------------
# simulation (model generator, used for recovery studies)


def simulate_residuals(params: RegimeParams, ages, years, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Draw residuals and states from the calibrated model.

    Returns ``(z, states)`` with ``z`` of shape (n_ages, n_years).
    """
    rng = np.random.default_rng(seed)
    ages = np.asarray(ages)
    years = np.asarray(years)
    P = memory_transition_matrix(params.p12, params.p21)
    pi = stationary_distribution(params.p12, params.p21)
    states = np.empty(years.size, dtype=int)
    states[0] = rng.choice(3, p=pi)
    for t in range(1, years.size):
        states[t] = rng.choice(3, p=P[states[t - 1]])
    sd = residual_volatility(ages, years, params)
    z = sd * rng.standard_normal(sd.shape)
    hvs = states != LVS
    shocks = params.shock_mean + params.shock_sd * rng.standard_normal(years.size)
    z = z + np.outer(params.loading, np.where(hvs, shocks, 0.0))
    return z, states


# ---------------------------------------------------------------------------
# serialisation


def save_regime(fit: RegimeFit, directory: str | Path, name: str) -> Path:
    """Scalars as JSON, the loading by age as CSV, filtered probabilities as CSV."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    p = fit.params
    scalars = {k: v for k, v in asdict(p).items() if k != "loading"}
    scalars["loglik"] = fit.loglik
    scalars["rounds"] = fit.rounds
    scalars["n_ages"] = int(np.asarray(p.loading).size)
    (out / f"{name}.json").write_text(json.dumps(scalars, indent=2, sort_keys=True), encoding="utf-8")
    rows = ["age,loading"] + [f"{p.age_min + i},{float(v)!r}" for i, v in enumerate(p.loading)]
    (out / f"{name}_loading.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def save_filtered(years, probs: np.ndarray, path: str | Path) -> None:
    rows = ["year,lvs,hvs_entry,hvs"]
    rows += [f"{int(y)},{a!r},{b!r},{c!r}" for y, (a, b, c) in zip(years, probs.tolist())]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_filtered(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return raw[:, 0].astype(int), raw[:, 1:]


def load_regime(directory: str | Path, name: str) -> RegimeParams:
    src = Path(directory)
    scalars = json.loads((src / f"{name}.json").read_text(encoding="utf-8"))
    raw = np.loadtxt(src / f"{name}_loading.csv", delimiter=",", skiprows=1, ndmin=2)
    keys = ("p12", "p21", "noise_sd1", "noise_slope1", "noise_sd2", "noise_slope2", "shock_mean", "shock_sd")
    return RegimeParams(
        *[float(scalars[k]) for k in keys],
        loading=raw[:, 1],
        epoch_year=int(scalars["epoch_year"]),
        age_min=int(scalars["age_min"]),
    )
