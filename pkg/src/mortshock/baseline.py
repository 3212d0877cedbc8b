"""Baseline multi-population mortality improvement model.

The improvement model

    log mu[x,t] - log mu[x,t-1] = A[x] + sum_i B_i[x] K_i[t] + sum_j beta_j[x] kappa_j[t]

is fitted in its cumulated (level) form

    log mu[x,t] = log mu[x,t0] + (t - t0) A[x] + sum_i B_i[x] L_i[t] + sum_j beta_j[x] lambda_j[t]

by Poisson maximum likelihood: first the common part on the aggregated
panel, then the country deviation with the common part held fixed.
Parameters are returned in the canonical identifiable form (unit-norm,
orthogonal loadings; orthogonal improvement-rate period effects; common
period effects summing to zero).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import MortalityPanel, crude_death_rates
from .errors import ConvergenceError, NumericalError, ValidationError

log = logging.getLogger(__name__)

_EXP_LIMIT = 700.0


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class CommonTrendParams:
    ages: np.ndarray
    years: np.ndarray
    A: np.ndarray  # (n_ages,)
    B: np.ndarray  # (m, n_ages)
    L: np.ndarray  # (m, n_years), L[:, 0] == 0

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def K(self) -> np.ndarray:
        """Improvement-form period effects for ``years[1:]``."""
        return np.diff(self.L, axis=1)

    def level_predictor(self, anchor: np.ndarray) -> np.ndarray:
        steps = (self.years - self.years[0]).astype(float)
        return anchor[:, None] + np.outer(self.A, steps) + self.B.T @ self.L


@dataclass(frozen=True)
class CountryDeviationParams:
    country_code: str
    ages: np.ndarray
    years: np.ndarray
    beta: np.ndarray  # (l, n_ages)
    lam: np.ndarray  # (l, n_years), lam[:, 0] == 0

    @property
    def l(self) -> int:  # noqa: E743
        return self.beta.shape[0]

    @property
    def kappa(self) -> np.ndarray:
        return np.diff(self.lam, axis=1)


@dataclass(frozen=True)
class BaselineParams:
    common: CommonTrendParams
    deviation: CountryDeviationParams
    anchor_common: np.ndarray
    anchor_country: np.ndarray
    excluded_years: tuple[int, ...] = ()
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def ages(self) -> np.ndarray:
        return self.common.ages

    @property
    def years(self) -> np.ndarray:
        return self.common.years

    def level_predictor(self) -> np.ndarray:
        """Country log force of mortality implied by the fit, over all years."""
        eta = self.common.level_predictor(self.anchor_country)
        return eta + self.deviation.beta.T @ self.deviation.lam

    def improvement_predictor(self) -> np.ndarray:
        """``A + B K + beta kappa`` for ``years[1:]``, shape (n_ages, n_years - 1)."""
        K, kappa = to_improvement_form(self)
        return self.common.A[:, None] + self.common.B.T @ K + self.deviation.beta.T @ kappa


# ---------------------------------------------------------------------------
# likelihood


def poisson_loglik(eta, deaths, exposures, active_years=None, years=None) -> float:
    """Poisson log-likelihood ``sum d*eta - E*exp(eta)`` without constants.

    ``active_years`` restricts the sum to a subset of the columns; it is
    either a boolean column mask or a collection of years (then ``years``
    labels the columns).
    """
    eta = np.asarray(eta, dtype=float)
    deaths = np.asarray(deaths, dtype=float)
    exposures = np.asarray(exposures, dtype=float)
    mask = _column_mask(eta.shape[-1], active_years, years)
    eta_a, d_a, e_a = eta[..., mask], deaths[..., mask], exposures[..., mask]
    if (e_a <= 0).any():
        raise ValidationError("exposures must be positive on active cells")
    over = eta_a > _EXP_LIMIT
    if over.any():
        cell = tuple(int(i) for i in np.argwhere(over)[0])
        raise NumericalError(f"exp(eta) overflows at active cell {cell}; the fit diverged")
    return float(np.sum(d_a * eta_a - e_a * np.exp(eta_a)))


def _column_mask(n: int, active, years) -> np.ndarray:
    if active is None:
        return np.ones(n, dtype=bool)
    active = np.asarray(active)
    if active.dtype == bool:
        if active.shape != (n,):
            raise ValidationError("active mask does not match the number of years")
        return active
    if years is None:
        raise ValidationError("years are needed to interpret a list of active years")
    return np.isin(np.asarray(years), active)


# ---------------------------------------------------------------------------
# identifiability


def orthogonality_quadratic(B1, B2, K1, K2, center: bool = True):
    """Coefficients ``(a, b, c)`` and discriminant of the quadratic whose two
    roots give the loading ratios of the orthogonalised factors."""
    B1, B2, K1, K2 = (np.asarray(v, dtype=float) for v in (B1, B2, K1, K2))
    if center:
        K1, K2 = K1 - K1.mean(), K2 - K2.mean()
    b11, b22, b12 = B1 @ B1, B2 @ B2, B1 @ B2
    k11, k22, k12 = K1 @ K1, K2 @ K2, K1 @ K2
    xi1 = k12 * b11 + b12 * k22
    xi2 = k12 * b22 + b12 * k11
    a = xi2 * k12
    b = xi1 * k11 - xi2 * k22
    c = -xi1 * k12
    return a, b, c, b * b - 4 * a * c


def _sign(v: float) -> float:
    return -1.0 if v < 0 else 1.0


def _complete_basis(b: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to unit ``b``, as close to ``other`` as possible."""
    v = other - (other @ b) * b
    if np.linalg.norm(v) < 1e-8 * max(1.0, np.linalg.norm(other)):
        n = b.size
        for cand in (np.linspace(-1, 1, n), np.ones(n), np.eye(n)[0]):
            v = cand - (cand @ b) * b
            if np.linalg.norm(v) > 1e-8:
                break
    v = v / np.linalg.norm(v)
    return v * _sign(v.sum())


def normalize_one_factor(B, K, center: bool = True):
    """Unit-norm loading, zero-mean (if ``center``) period effect.

    Returns ``(B, K, A_adjustment)``.
    """
    B = np.asarray(B, dtype=float)
    K = np.asarray(K, dtype=float)
    mean = K.mean() if center else 0.0
    shift = B * mean
    nb = np.linalg.norm(B)
    if nb == 0:
        raise NumericalError("age loading vanished")
    s = _sign(B.sum())
    return s * B / nb, s * nb * (K - mean), shift


def normalize_two_factor(B1, B2, K1, K2, center: bool = True):
    """Map two age/period factor pairs onto the canonical identifiable form.

    The returned loadings have unit norm and are orthogonal, the period
    effects are orthogonal and (with ``center``) sum to zero, and
    ``A + B1 K1 + B2 K2`` is unchanged once ``A_adjustment`` is added to
    ``A``. Each loading has a non-negative sum; the first loading is the one
    with the larger range.

    Returns ``(B1, B2, K1, K2, A_adjustment)``.
    """
    B = np.vstack([np.asarray(B1, dtype=float), np.asarray(B2, dtype=float)])
    K = np.vstack([np.asarray(K1, dtype=float), np.asarray(K2, dtype=float)])
    mean = K.mean(axis=1) if center else np.zeros(2)
    Kc = K - mean[:, None]
    shift = B.T @ mean

    Bt, Kt = _orthogonalise(B, Kc)
    if np.ptp(Bt[1]) > np.ptp(Bt[0]):
        Bt, Kt = Bt[::-1], Kt[::-1]
    return Bt[0], Bt[1], Kt[0], Kt[1], shift


def _orthogonalise(B: np.ndarray, Kc: np.ndarray):
    b11, b22, b12 = B[0] @ B[0], B[1] @ B[1], B[0] @ B[1]
    k11, k22, k12 = Kc[0] @ Kc[0], Kc[1] @ Kc[1], Kc[0] @ Kc[1]
    nb1, nb2 = np.sqrt(b11), np.sqrt(b22)
    if nb1 == 0 or nb2 == 0:
        raise NumericalError("age loading vanished")
    scale_k = max(k11, k22)
    if scale_k == 0 or min(k11, k22) <= 1e-28 * scale_k:
        return _with_null_factor(B, Kc, k11, k22)

    r_b = b12 / (nb1 * nb2)
    r_k = k12 / np.sqrt(k11 * k22)
    xi1 = k12 * b11 + b12 * k22
    xi2 = k12 * b22 + b12 * k11
    xi_scale = np.sqrt(b11 * b22 * k11 * k22)
    if max(abs(xi1), abs(xi2)) <= 1e-14 * xi_scale:
        if abs(r_b) <= 1e-14 and abs(r_k) <= 1e-14:
            # already orthogonal: only the scaling constraints are active
            s1, s2 = _sign(B[0].sum()), _sign(B[1].sum())
            return (
                np.vstack([s1 * B[0] / nb1, s2 * B[1] / nb2]),
                np.vstack([s1 * nb1 * Kc[0], s2 * nb2 * Kc[1]]),
            )
        # both factors carry the same weight: every rotation is admissible
        return _svd_orthogonalise(B, Kc)

    swapped = abs(xi2) < abs(xi1)
    if swapped:
        B, Kc = B[::-1], Kc[::-1]
        b11, b22 = b22, b11
        k11, k22 = k22, k11
        xi1, xi2 = xi2, xi1
        nb1, nb2 = nb2, nb1
    # product and sum of the two loading ratios
    p = -xi1 / xi2
    if abs(r_k) >= abs(r_b):
        s = (p * k11 + k22) / k12
    else:
        s = -(b11 + p * b22) / b12
    disc = max(s * s - 4.0 * p, 0.0)
    q = 0.5 * (s + _sign(s) * np.sqrt(disc))
    ratios = (q, p / q) if q != 0 else (0.0, s)

    M = np.empty((2, 2))
    for col, r in enumerate(ratios):
        direction = B[0] + r * B[1]
        norm = np.linalg.norm(direction)
        if norm == 0 or not np.isfinite(norm):
            return _svd_orthogonalise(B, Kc)
        zeta1 = _sign(direction.sum()) / norm
        M[:, col] = (zeta1, zeta1 * r)
    Bt = M.T @ B
    Kt = np.linalg.solve(M, Kc)
    return Bt, Kt


def _with_null_factor(B, Kc, k11, k22):
    """At least one period effect is identically zero; its loading is free."""
    if k11 == 0 and k22 == 0:
        b1 = B[0] / np.linalg.norm(B[0])
        b1 = b1 * _sign(b1.sum())
        return np.vstack([b1, _complete_basis(b1, B[1])]), np.zeros_like(Kc)
    live = 0 if k11 >= k22 else 1
    nb = np.linalg.norm(B[live])
    s = _sign(B[live].sum())
    b_live = s * B[live] / nb
    k_live = s * nb * Kc[live]
    # the null factor's contribution is kept in the live one only if it is
    # numerically zero; it is by the guard in the caller
    b_null = _complete_basis(b_live, B[1 - live])
    out_b = np.empty_like(B)
    out_k = np.zeros_like(Kc)
    out_b[live], out_b[1 - live] = b_live, b_null
    out_k[live] = k_live
    return out_b, out_k


def _svd_orthogonalise(B, Kc):
    U, S, Vt = np.linalg.svd(B.T @ Kc, full_matrices=False)
    Bt = U[:, :2].T.copy()
    Kt = S[:2, None] * Vt[:2]
    for i in range(2):
        s = _sign(Bt[i].sum())
        Bt[i] *= s
        Kt[i] *= s
    return Bt, Kt


def normalize_factors(B: np.ndarray, K: np.ndarray, center: bool = True):
    """Dispatch on the factor count; returns ``(B, K, A_adjustment)``."""
    m = B.shape[0]
    if m == 0:
        return B, K, np.zeros(B.shape[1])
    if m == 1:
        b, k, shift = normalize_one_factor(B[0], K[0], center)
        return b[None], k[None], shift
    if m == 2:
        b1, b2, k1, k2, shift = normalize_two_factor(B[0], B[1], K[0], K[1], center)
        return np.vstack([b1, b2]), np.vstack([k1, k2]), shift
    raise ValidationError("only one or two factors are supported")


def constraint_residuals(B: np.ndarray, L: np.ndarray, terminal_zero: bool = True) -> dict:
    """Absolute violations of the identifiability constraints (level form)."""
    out = {}
    K = np.diff(L, axis=1)
    for i in range(B.shape[0]):
        out[f"norm_B{i + 1}"] = abs(B[i] @ B[i] - 1.0)
        out[f"start_L{i + 1}"] = abs(L[i, 0])
        if terminal_zero:
            out[f"terminal_L{i + 1}"] = abs(L[i, -1])
    if B.shape[0] == 2:
        out["orth_B"] = abs(B[0] @ B[1])
        out["orth_K"] = abs(K[0] @ K[1])
    return out


# ---------------------------------------------------------------------------
# imputation


def impute_missing_periods(values, missing, k: int = 4) -> np.ndarray:
    """Fill gaps with a two-sided exponentially weighted moving average.

    Each gap takes the weighted mean of the observed values at most ``k``
    positions away, with weight ``2**-|offset|``. When no observed value
    lies inside the window it grows until at least two are found.
    """
    values = np.asarray(values, dtype=float).copy()
    missing = np.asarray(missing, dtype=bool)
    observed = ~missing
    if not observed.any():
        raise ValidationError("cannot impute a series without observed values")
    if not missing.any():
        return values
    if observed.sum() < 2:
        raise ValidationError("imputation needs at least two observed values")
    n = values.size
    idx = np.arange(n)
    obs_idx = idx[observed]
    obs_val = values[observed]
    for g in idx[missing]:
        dist = np.abs(obs_idx - g)
        window = k
        inside = dist <= window
        if not inside.any():
            window = int(np.sort(dist)[1])
            inside = dist <= window
        w = 0.5 ** dist[inside]
        values[g] = np.sum(w * obs_val[inside]) / np.sum(w)
    return values


# ---------------------------------------------------------------------------
# fitting engine


@dataclass
class _FitResult:
    loglik: float
    iterations: int
    gradient_norm: float
    constraints: dict


def _initial_loadings(n_ages: int, count: int) -> np.ndarray:
    out = np.zeros((count, n_ages))
    if count >= 1:
        out[0] = 1.0 / np.sqrt(n_ages)
    if count >= 2:
        c = np.arange(n_ages) - (n_ages - 1) / 2.0
        if np.any(c):
            out[1] = c / np.linalg.norm(c)
        else:
            out[1] = out[0]
    return out


def _age_slopes(log_rates: np.ndarray, steps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    slopes = np.zeros(log_rates.shape[0])
    for i, row in enumerate(log_rates):
        ok = mask & np.isfinite(row)
        if ok.sum() >= 2:
            slopes[i] = np.polyfit(steps[ok], row[ok], 1)[0]
    return slopes


def _newton_step(resid_dot, info, skip_below=1e-300):
    """Univariate Newton increment ``score / information`` (0 where no information)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(info > skip_below, resid_dot / info, 0.0)
    return step


def _fit_bilinear(
    deaths: np.ndarray,
    exposures: np.ndarray,
    offset: np.ndarray,
    mask: np.ndarray,
    loadings: np.ndarray,
    periods: np.ndarray,
    trend: np.ndarray | None,
    steps: np.ndarray,
    center: bool,
    tol: float,
    max_iter: int,
    constraint_tol: float,
    impute_window: int,
    grad_tol: float = 1e-10,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray, _FitResult]:
    """Coordinate-wise Newton-Raphson for ``offset + steps*trend + loadings' periods``.

    ``trend`` is ``None`` when no age-specific slope is estimated (country
    deviation). Period effects are in level form with the first column pinned
    at zero; columns outside ``mask`` carry no data and are imputed.
    """
    W = np.broadcast_to(mask[None, :], deaths.shape).astype(float)
    Dw = np.where(W > 0, deaths, 0.0)
    Ew = np.where(W > 0, exposures, 0.0)
    B = loadings.copy()
    L = periods.copy()
    A = None if trend is None else trend.copy()
    free_cols = mask.copy()
    free_cols[0] = False
    gaps = ~mask
    gaps[0] = False
    nb = B.shape[0]

    def predictor():
        eta = offset + B.T @ L
        if A is not None:
            eta = eta + np.outer(A, steps)
        return eta

    def fitted(eta):
        if (eta[:, mask] > _EXP_LIMIT).any():
            raise NumericalError("exp(eta) overflow during Newton-Raphson; the fit diverged")
        return Ew * np.exp(np.minimum(eta, _EXP_LIMIT))

    eta = predictor()
    ll_prev = np.sum(Dw * eta - fitted(eta))
    # the score scales with the number of deaths; judge it relative to that
    death_scale = max(float(Dw.sum()), 1.0)
    gnorm = np.inf
    cons: dict = {}
    for it in range(1, max_iter + 1):
        if A is not None:
            mu = fitted(eta)
            A = A + _newton_step((Dw - mu) @ steps, mu @ (steps**2))
            eta = predictor()
        for i in range(nb):
            mu = fitted(eta)
            B[i] = B[i] + _newton_step((Dw - mu) @ L[i], mu @ (L[i] ** 2))
            eta = predictor()
        for i in range(nb):
            mu = fitted(eta)
            step = _newton_step(B[i] @ (Dw - mu), (B[i] ** 2) @ mu)
            L[i] = L[i] + np.where(free_cols, step, 0.0)
            eta = predictor()
        if nb and gaps.any():
            for i in range(nb):
                L[i] = impute_missing_periods(L[i], gaps, impute_window)
        if nb:
            K = np.diff(L, axis=1)
            B, K, shift = normalize_factors(B, K, center=center)
            if A is not None:
                A = A + shift
            L = np.hstack([np.zeros((nb, 1)), np.cumsum(K, axis=1)])
        eta = predictor()
        mu = fitted(eta)
        ll = float(np.sum(Dw * eta - mu))
        if not np.isfinite(ll):
            raise NumericalError("log-likelihood became non-finite")
        cons = constraint_residuals(B, L, terminal_zero=center) if nb else {}
        rel = abs(ll - ll_prev) / max(1.0, abs(ll))
        ll_prev = ll
        if rel < tol and (not cons or max(cons.values()) < constraint_tol):
            gnorm = _gradient_norm(Dw - mu, A, B, L, steps, free_cols)
            if gnorm <= grad_tol * death_scale:
                return A, B, L, _FitResult(ll, it, gnorm, cons)
    gnorm = _gradient_norm(Dw - mu, A, B, L, steps, free_cols)
    raise ConvergenceError(
        f"Newton-Raphson did not converge in {max_iter} sweeps (gradient sup-norm {gnorm:.3e})",
        gradient_norm=gnorm,
        iterations=max_iter,
    )


def _gradient_norm(resid, A, B, L, steps, free_cols) -> float:
    parts = [np.abs(resid @ L[i]).max() for i in range(B.shape[0])]
    parts += [np.abs((B[i] @ resid)[free_cols]).max() for i in range(B.shape[0]) if free_cols.any()]
    if A is not None:
        parts.append(np.abs(resid @ steps).max())
    return float(max(parts)) if parts else 0.0


def _active_mask(years: np.ndarray, active_years) -> np.ndarray:
    if active_years is None:
        return np.ones(years.size, dtype=bool)
    active_years = set(int(y) for y in active_years)
    unknown = active_years - set(int(y) for y in years)
    if unknown:
        raise ValidationError(f"active years outside the panel: {sorted(unknown)[:5]}")
    mask = np.isin(years, list(active_years))
    if mask.sum() < 3:
        raise ValidationError("at least three active years are required")
    return mask


def _check_degenerate(deaths: np.ndarray, mask: np.ndarray, ages: np.ndarray, what: str) -> None:
    zero_rows = np.where(deaths[:, mask].sum(axis=1) <= 0)[0]
    if zero_rows.size:
        raise NumericalError(f"{what}: age {int(ages[zero_rows[0]])} has no deaths in the active years")
    if np.any(deaths[:, 0] <= 0):
        i = int(np.argmax(deaths[:, 0] <= 0))
        raise NumericalError(f"{what}: zero deaths at age {int(ages[i])} in the first year; anchor undefined")


def fit_common_trend(
    panel: MortalityPanel,
    active_years: Iterable[int] | None = None,
    m: int = 2,
    tol: float = 1e-10,
    max_iter: int = 5000,
    constraint_tol: float = 1e-8,
    impute_window: int = 4,
) -> CommonTrendParams:
    """Fit ``A``, ``B`` and ``L`` on the aggregated panel.

    Years outside ``active_years`` are dropped from the likelihood and their
    period effects are imputed after every sweep.
    """
    if m not in (1, 2):
        raise ValidationError("the common trend supports m = 1 or m = 2 factors")
    years = panel.years
    mask = _active_mask(years, active_years)
    d, e = panel.common_deaths, panel.common_exposures
    _check_degenerate(d, mask, panel.ages, "common panel")
    steps = (years - years[0]).astype(float)
    anchor = np.log(d[:, 0] / e[:, 0])
    offset = np.broadcast_to(anchor[:, None], d.shape)
    with np.errstate(divide="ignore"):
        log_rates = np.log(crude_death_rates(panel))
    A0 = _age_slopes(log_rates, steps, mask)
    A, B, L, res = _fit_bilinear(
        d, e, offset, mask, _initial_loadings(panel.ages.size, m),
        np.zeros((m, years.size)), A0, steps, True, tol, max_iter, constraint_tol, impute_window,
    )
    log.debug("common trend converged in %d sweeps, loglik %.6f", res.iterations, res.loglik)
    params = CommonTrendParams(panel.ages.copy(), years.copy(), A, B, L)
    object.__setattr__(params, "_fit", res)
    return params


def fit_country_deviation(
    panel: MortalityPanel,
    common: CommonTrendParams,
    target_country: str,
    active_years: Iterable[int] | None = None,
    l: int = 2,  # noqa: E741
    tol: float = 1e-10,
    max_iter: int = 5000,
    constraint_tol: float = 1e-8,
    impute_window: int = 4,
) -> CountryDeviationParams:
    """Fit ``beta`` and ``lambda`` for one country with the common trend fixed."""
    if l not in (0, 1, 2):
        raise ValidationError("the country deviation supports l = 0, 1 or 2 factors")
    series = panel.series(target_country)
    years = panel.years
    if series.missing.any():
        i, j = np.argwhere(series.missing)[0]
        raise ValidationError(
            f"{target_country}: missing cell (year={int(years[j])}, age={int(panel.ages[i])})"
        )
    mask = _active_mask(years, active_years)
    d, e = series.deaths, series.exposures
    _check_degenerate(d, mask, panel.ages, target_country)
    anchor = np.log(d[:, 0] / e[:, 0])
    base = common.level_predictor(anchor)
    if l == 0:
        empty = np.zeros((0, years.size))
        return CountryDeviationParams(target_country, panel.ages.copy(), years.copy(),
                                      np.zeros((0, panel.ages.size)), empty)
    steps = (years - years[0]).astype(float)
    _, beta, lam, res = _fit_bilinear(
        d, e, base, mask, _initial_loadings(panel.ages.size, l),
        np.zeros((l, years.size)), None, steps, False, tol, max_iter, constraint_tol, impute_window,
    )
    log.debug("%s deviation converged in %d sweeps", target_country, res.iterations)
    params = CountryDeviationParams(target_country, panel.ages.copy(), years.copy(), beta, lam)
    object.__setattr__(params, "_fit", res)
    return params


def fit_baseline(
    panel: MortalityPanel,
    target_country: str,
    active_years: Iterable[int] | None = None,
    m: int = 2,
    l: int = 2,  # noqa: E741
    tol: float = 1e-10,
    max_iter: int = 5000,
    constraint_tol: float = 1e-8,
    impute_window: int = 4,
) -> BaselineParams:
    """Two-step calibration: common trend, then the target country's deviation."""
    common = fit_common_trend(panel, active_years, m, tol, max_iter, constraint_tol, impute_window)
    dev = fit_country_deviation(
        panel, common, target_country, active_years, l, tol, max_iter, constraint_tol, impute_window
    )
    series = panel.series(target_country)
    anchor_c = np.log(series.deaths[:, 0] / series.exposures[:, 0])
    anchor_a = np.log(panel.common_deaths[:, 0] / panel.common_exposures[:, 0])
    excluded = ()
    if active_years is not None:
        act = set(int(y) for y in active_years)
        excluded = tuple(int(y) for y in panel.years if int(y) not in act)
    diag = {
        "common_loglik": common._fit.loglik,
        "common_iterations": common._fit.iterations,
        "common_gradient_norm": common._fit.gradient_norm,
        "common_constraints": common._fit.constraints,
    }
    if hasattr(dev, "_fit"):
        diag.update(
            deviation_loglik=dev._fit.loglik,
            deviation_iterations=dev._fit.iterations,
            deviation_gradient_norm=dev._fit.gradient_norm,
            deviation_constraints=dev._fit.constraints,
        )
    return BaselineParams(common, dev, anchor_a, anchor_c, excluded, diag)


def to_improvement_form(params: BaselineParams) -> tuple[np.ndarray, np.ndarray]:
    """First differences of the cumulated period effects: ``(K, kappa)``.

    Both are indexed by ``years[1:]``; there is no improvement rate for the
    first calibration year.
    """
    return np.diff(params.common.L, axis=1), np.diff(params.deviation.lam, axis=1)


# ---------------------------------------------------------------------------
# serialisation


def _write_vector(path: Path, index_name: str, index: np.ndarray, values: np.ndarray) -> None:
    lines = [f"{index_name},value"]
    lines += [f"{int(i)},{float(v)!r}" for i, v in zip(index, values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_vector(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return raw[:, 0].astype(int), raw[:, 1]


def save_baseline(params: BaselineParams, directory: str | Path) -> Path:
    """Write one CSV per effect vector plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    c, dv = params.common, params.deviation
    _write_vector(out / "A.csv", "age", c.ages, c.A)
    _write_vector(out / "anchor_common.csv", "age", c.ages, params.anchor_common)
    _write_vector(out / "anchor_country.csv", "age", c.ages, params.anchor_country)
    for i in range(c.m):
        _write_vector(out / f"B{i + 1}.csv", "age", c.ages, c.B[i])
        _write_vector(out / f"L{i + 1}.csv", "year", c.years, c.L[i])
    for j in range(dv.l):
        _write_vector(out / f"beta{j + 1}.csv", "age", dv.ages, dv.beta[j])
        _write_vector(out / f"lambda{j + 1}.csv", "year", dv.years, dv.lam[j])
    manifest = {
        "m": c.m,
        "l": dv.l,
        "country": dv.country_code,
        "age_range": [int(c.ages[0]), int(c.ages[-1])],
        "year_range": [int(c.years[0]), int(c.years[-1])],
        "excluded_years": list(params.excluded_years),
        "constraint_residuals": {
            "common": constraint_residuals(c.B, c.L, True),
            "deviation": constraint_residuals(dv.beta, dv.lam, False) if dv.l else {},
        },
        "diagnostics": _jsonable(params.diagnostics),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_baseline(directory: str | Path) -> BaselineParams:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    ages, A = _read_vector(src / "A.csv")
    _, anchor_a = _read_vector(src / "anchor_common.csv")
    _, anchor_c = _read_vector(src / "anchor_country.csv")
    y0, y1 = manifest["year_range"]
    years = np.arange(y0, y1 + 1)
    B = np.array([_read_vector(src / f"B{i + 1}.csv")[1] for i in range(manifest["m"])])
    L = np.array([_read_vector(src / f"L{i + 1}.csv")[1] for i in range(manifest["m"])])
    beta = np.array([_read_vector(src / f"beta{j + 1}.csv")[1] for j in range(manifest["l"])])
    lam = np.array([_read_vector(src / f"lambda{j + 1}.csv")[1] for j in range(manifest["l"])])
    beta = beta.reshape(manifest["l"], ages.size)
    lam = lam.reshape(manifest["l"], years.size)
    common = CommonTrendParams(ages, years, A, B.reshape(-1, ages.size), L.reshape(-1, years.size))
    dev = CountryDeviationParams(manifest["country"], ages, years, beta, lam)
    return BaselineParams(
        common, dev, anchor_a, anchor_c, tuple(manifest["excluded_years"]), manifest.get("diagnostics", {})
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
