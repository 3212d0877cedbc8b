"""Drift-plus-noise dynamics of the stacked period-effect vector.

The improvement-form period effects of the common trend and of the
country deviation are stacked per year. They are modelled as i.i.d.
Gaussian with a drift that is zero for the country components, estimated
with geometrically decaying weights ``gamma ** (t_max - t)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_GAMMA_GRID = tuple(np.round(np.arange(0.900, 1.0005, 0.001), 3))


@dataclass(frozen=True)
class PeriodDynParams:
    drift: np.ndarray
    cov: np.ndarray
    gamma: float
    n_common: int

    @property
    def dim(self) -> int:
        return self.drift.size

    @property
    def rank(self) -> int:
        return int(np.sum(np.linalg.eigvalsh(self.cov) > 1e-12 * max(1.0, np.abs(self.cov).max())))


def stack_period_effects(K: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    """Rows are years, columns ``(K_1..K_m, kappa_1..kappa_l)``."""
    return np.vstack([np.atleast_2d(K), np.atleast_2d(kappa).reshape(-1, np.shape(K)[-1])]).T


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise ValidationError(f"decay rate {gamma} outside (0, 1]")


def fit_weighted_gaussian(series, gamma: float, n_common: int) -> PeriodDynParams:
    """Weighted Gaussian fit with the country drifts pinned at zero.

    Parameters
    ----------
    series : (T, d) array, one row per year in chronological order.
    gamma : weight decay; the last year gets weight 1.
    n_common : number of leading components with a free drift.
    """
    _check_gamma(gamma)
    X = np.asarray(series, dtype=float)
    if X.ndim != 2:
        raise ValidationError("period series must be a (years, components) array")
    T, d = X.shape
    if T < d + 2:
        raise ValidationError(f"need at least {d + 2} years, got {T}")
    if not 0 <= n_common <= d:
        raise ValidationError("n_common out of range")
    w = gamma ** np.arange(T - 1, -1, -1, dtype=float)
    w = w / w.sum()
    drift = np.zeros(d)
    drift[:n_common] = w @ X[:, :n_common]
    dev = X - drift
    cov = (dev * w[:, None]).T @ dev
    cov = 0.5 * (cov + cov.T)
    return PeriodDynParams(drift, cov, float(gamma), int(n_common))


def gaussian_logpdf(x, mean, cov) -> float:
    """Multivariate normal log density; ``-inf`` for a singular covariance."""
    x = np.asarray(x, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return -np.inf
    diag = np.diag(chol)
    if np.any(diag <= 1e-150):
        return -np.inf
    z = np.linalg.solve(chol, x - mean)
    return float(-0.5 * (x.size * np.log(2 * np.pi) + z @ z) - np.sum(np.log(diag)))


def decay_scores(series, years, grid: Sequence[float], first_eval_year: int, n_common: int) -> np.ndarray:
    """Average one-step-ahead predictive log density for each grid value."""
    X = np.asarray(series, dtype=float)
    years = np.asarray(years)
    T, d = X.shape
    start = int(np.searchsorted(years, first_eval_year))
    if start >= T or years[start] != first_eval_year:
        raise ValidationError(f"first evaluation year {first_eval_year} not in the series")
    if start < 50:
        raise ValidationError("at least 50 years are required before the first evaluation year")
    if start >= T - 1:
        raise ValidationError("no one-step-ahead evaluations remain")
    scores = np.empty(len(grid))
    for g, gamma in enumerate(grid):
        _check_gamma(gamma)
        # running decayed sums of weights, first and second moments
        s0, s1, s2 = 0.0, np.zeros(d), np.zeros((d, d))
        total = 0.0
        for t in range(T - 1):
            x = X[t]
            s0 = gamma * s0 + 1.0
            s1 = gamma * s1 + x
            s2 = gamma * s2 + np.outer(x, x)
            if t < start:
                continue
            c = np.zeros(d)
            c[:n_common] = s1[:n_common] / s0
            cov = (s2 - np.outer(c, s1) - np.outer(s1, c)) / s0 + np.outer(c, c)
            total += gaussian_logpdf(X[t + 1], c, 0.5 * (cov + cov.T))
        scores[g] = total / (T - 1 - start)
    return scores


def select_decay(
    series, years, grid: Sequence[float] = DEFAULT_GAMMA_GRID, first_eval_year: int | None = None, n_common: int = 2
) -> tuple[float, np.ndarray]:
    """Grid value with the best average predictive score (ties to the larger one)."""
    years = np.asarray(years)
    if first_eval_year is None:
        first_eval_year = int(years[0]) + 50
    grid = [float(g) for g in grid]
    if not grid:
        raise ValidationError("empty decay grid")
    scores = decay_scores(series, years, grid, first_eval_year, n_common)
    best = None
    for g, s in sorted(zip(grid, scores)):
        if best is None or s >= best[1]:
            best = (g, s)
    return best[0], scores


def _factor(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals.min() < -1e-10 * max(1.0, np.abs(vals).max()):
        raise ValidationError("innovation covariance is not positive semi-definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_periods(params: PeriodDynParams, n_years: int, n_paths: int, seed=0) -> np.ndarray:
    """I.i.d. draws ``drift + F e`` with ``F F' = cov``; shape (n_paths, n_years, d)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    F = _factor(params.cov)
    e = rng.standard_normal((n_paths, n_years, params.dim))
    return params.drift + e @ F.T


def save_dynamics(params: PeriodDynParams, path: str | Path, scores=None, grid=None) -> None:
    payload = {
        "drift": params.drift.tolist(),
        "cov": params.cov.tolist(),
        "gamma": params.gamma,
        "n_common": params.n_common,
        "rank": params.rank,
    }
    if scores is not None:
        payload["grid"] = list(grid)
        payload["scores"] = [float(s) for s in scores]
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_dynamics(path: str | Path) -> PeriodDynParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return PeriodDynParams(
        np.asarray(payload["drift"], dtype=float),
        np.asarray(payload["cov"], dtype=float),
        float(payload["gamma"]),
        int(payload["n_common"]),
    )
