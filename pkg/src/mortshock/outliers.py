"""Spline detrending of period effects and robust-distance shock detection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2

from .errors import NumericalError, ValidationError
from .mcd import fast_mcd, mahalanobis

DEFAULT_EXCLUSIONS = (
    1854, 1855, 1856, 1859, 1866, 1870, 1871, 1889, 1890, 1891, 1892,
    1914, 1915, 1916, 1917, 1918, 1919, 1940, 1941, 1942, 1943, 1944, 1945, 2020, 2021,
)
GCV_GRID = np.logspace(-4, 4, 61)


@dataclass(frozen=True)
class SplineFit:
    """Natural cubic smoothing spline stored by knot values and second derivatives."""

    knots: np.ndarray
    values: np.ndarray
    second_derivs: np.ndarray
    smoothing: float
    gcv_score: float

    def __call__(self, t) -> np.ndarray:
        return evaluate_spline(self, t)


@dataclass(frozen=True)
class RemainderSeries:
    years: np.ndarray
    R: np.ndarray  # (m, n_years)
    trend: np.ndarray  # spline values at every year
    epoch_split_year: int | None = None


@dataclass(frozen=True)
class EpochEstimate:
    first_year: int
    last_year: int
    location: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class OutlierReport:
    years: np.ndarray
    distances: np.ndarray
    threshold: float
    outlier_years: tuple[int, ...]
    epochs: list[EpochEstimate] = field(default_factory=list)

    @property
    def flagged(self) -> np.ndarray:
        return self.distances > self.threshold

    def runs(self) -> list[tuple[int, int]]:
        return outlier_runs(self.outlier_years)


def _penalty_matrices(x: np.ndarray):
    h = np.diff(x)
    n = x.size
    Q = np.zeros((n, n - 2))
    R = np.zeros((n - 2, n - 2))
    for j in range(n - 2):
        Q[j, j] = 1.0 / h[j]
        Q[j + 1, j] = -1.0 / h[j] - 1.0 / h[j + 1]
        Q[j + 2, j] = 1.0 / h[j + 1]
        R[j, j] = (h[j] + h[j + 1]) / 3.0
        if j + 1 < n - 2:
            R[j, j + 1] = R[j + 1, j] = h[j + 1] / 6.0
    return Q, R


def fit_smoothing_spline(
    years,
    series,
    exclude_years: Iterable[int] = (),
    smoothing: float | None = None,
    grid: Sequence[float] = GCV_GRID,
) -> SplineFit:
    """Penalised least-squares natural cubic spline through the kept points.

    The penalty weight minimises ``n RSS / (n - tr S)^2`` over ``grid``
    unless ``smoothing`` is given.
    """
    years = np.asarray(years, dtype=float)
    y = np.asarray(series, dtype=float)
    keep = ~np.isin(years, np.asarray(list(exclude_years), dtype=float))
    x, y = years[keep], y[keep]
    if x.size < 10:
        raise ValidationError(f"smoothing spline needs at least 10 points, got {x.size}")
    order = np.argsort(x)
    x, y = x[order], y[order]
    if np.any(np.diff(x) <= 0):
        raise NumericalError("smoothing spline system is singular: repeated abscissae")
    Q, R = _penalty_matrices(x)
    QtQ = Q.T @ Q
    Qty = Q.T @ y
    n = x.size

    def smooth(lam):
        # Reinsch form: (R + lam Q'Q) g = Q'y, f = y - lam Q g
        if lam == 0:
            return y.copy(), np.zeros(n - 2), float(n)
        try:
            factor = cho_factor(R + lam * QtQ)
        except np.linalg.LinAlgError:
            raise NumericalError("smoothing spline system is singular") from None
        gam = cho_solve(factor, Qty)
        resid_trace = lam * np.trace(cho_solve(factor, QtQ))
        return y - lam * (Q @ gam), gam, n - resid_trace

    def gcv(lam):
        fit, _, tr = smooth(lam)
        rss = float(np.sum((y - fit) ** 2))
        denom = (n - tr) ** 2
        return n * rss / denom if denom > 0 else np.inf

    if smoothing is None:
        scores = np.array([gcv(lam) for lam in grid])
        best = int(np.argmin(scores))
        lam, score = float(grid[best]), float(scores[best])
    else:
        if smoothing < 0:
            raise ValidationError("smoothing parameter must be non-negative")
        lam, score = float(smoothing), float(gcv(smoothing))
    values, inner, _ = smooth(lam)
    gam = np.zeros(n)
    gam[1:-1] = inner
    return SplineFit(x, values, gam, lam, score)


def evaluate_spline(fit: SplineFit, t) -> np.ndarray:
    """Spline values at ``t``; linear continuation outside the knot range."""
    x, f, g = fit.knots, fit.values, fit.second_derivs
    shape = np.shape(t)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty_like(t)
    h0, hn = x[1] - x[0], x[-1] - x[-2]
    slope_lo = (f[1] - f[0]) / h0 - h0 * (2 * g[0] + g[1]) / 6.0
    slope_hi = (f[-1] - f[-2]) / hn + hn * (g[-2] + 2 * g[-1]) / 6.0
    lo, hi = t < x[0], t > x[-1]
    out[lo] = f[0] + slope_lo * (t[lo] - x[0])
    out[hi] = f[-1] + slope_hi * (t[hi] - x[-1])
    mid = ~(lo | hi)
    tm = t[mid]
    j = np.clip(np.searchsorted(x, tm, side="right") - 1, 0, x.size - 2)
    h = x[j + 1] - x[j]
    a = (x[j + 1] - tm) / h
    b = (tm - x[j]) / h
    out[mid] = a * f[j] + b * f[j + 1] + ((a**3 - a) * g[j] + (b**3 - b) * g[j + 1]) * h * h / 6.0
    return out.reshape(shape)


def compute_remainders(
    years, L, splines: Sequence[SplineFit], epoch_split_year: int | None = None
) -> RemainderSeries:
    """``L - spline(years)`` for every factor, excluded years included."""
    years = np.asarray(years)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if len(splines) != L.shape[0]:
        raise ValidationError("one spline per period-effect series is required")
    trend = np.vstack([evaluate_spline(s, years) for s in splines])
    return RemainderSeries(years.copy(), L - trend, trend, epoch_split_year)


def detrend_period_effects(
    years, L, exclude_years: Iterable[int] = DEFAULT_EXCLUSIONS, epoch_split_year: int | None = None
) -> tuple[RemainderSeries, list[SplineFit]]:
    exclude = list(exclude_years)
    splines = [fit_smoothing_spline(years, row, exclude) for row in np.atleast_2d(L)]
    return compute_remainders(years, L, splines, epoch_split_year), splines


def outlier_threshold(quantile: float, dim: int) -> float:
    return math.sqrt(chi2.ppf(quantile, dim))


def detect_outliers(
    remainders: RemainderSeries,
    quantile: float = 0.99,
    seed: int = 0,
    epoch_split_year: int | None = None,
) -> OutlierReport:
    """Flag years whose robust distance exceeds ``sqrt(chi2_m(quantile))``.

    With an epoch split the location/scatter is estimated separately before
    and from the split year; the flag set is the union over epochs.
    """
    if not 0 < quantile < 1:
        raise ValidationError("quantile must lie in (0, 1)")
    split = epoch_split_year if epoch_split_year is not None else remainders.epoch_split_year
    years = remainders.years
    X = remainders.R.T
    m = X.shape[1]
    masks = [np.ones(years.size, dtype=bool)]
    if split is not None:
        masks = [years < split, years >= split]
        masks = [mk for mk in masks if mk.any()]
    distances = np.empty(years.size)
    epochs = []
    for mk in masks:
        if mk.sum() < m + 2:
            raise ValidationError(f"epoch starting {int(years[mk][0])} has fewer than {m + 2} points")
        est = fast_mcd(X[mk], seed=seed)
        distances[mk] = mahalanobis(X[mk], est.location, est.covariance)
        epochs.append(EpochEstimate(int(years[mk][0]), int(years[mk][-1]), est.location, est.covariance))
    thr = outlier_threshold(quantile, m)
    flagged = tuple(int(y) for y in years[distances > thr])
    return OutlierReport(years.copy(), distances, thr, flagged, epochs)


def outlier_runs(years: Iterable[int]) -> list[tuple[int, int]]:
    """Collapse a set of years into maximal consecutive runs ``(first, last)``."""
    out: list[tuple[int, int]] = []
    for y in sorted(set(int(v) for v in years)):
        if out and y == out[-1][1] + 1:
            out[-1] = (out[-1][0], y)
        else:
            out.append((y, y))
    return out


def save_report(report: OutlierReport, directory: str | Path) -> Path:
    """CSV of distances per year plus the flagged set as JSON."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["year,distance,epoch,flagged"]
    for y, d in zip(report.years, report.distances):
        epoch = next(i for i, e in enumerate(report.epochs) if e.first_year <= y <= e.last_year)
        lines.append(f"{int(y)},{float(d)!r},{epoch},{int(d > report.threshold)}")
    (out / "outliers.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    payload = {
        "threshold": report.threshold,
        "outlier_years": list(report.outlier_years),
        "runs": [list(r) for r in report.runs()],
        "epochs": [
            {
                "first_year": e.first_year,
                "last_year": e.last_year,
                "location": e.location.tolist(),
                "scale": e.scale.tolist(),
            }
            for e in report.epochs
        ],
    }
    (out / "outliers.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return out


def load_outlier_years(directory: str | Path) -> tuple[int, ...]:
    payload = json.loads((Path(directory) / "outliers.json").read_text(encoding="utf-8"))
    return tuple(int(y) for y in payload["outlier_years"])
