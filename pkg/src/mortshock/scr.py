"""Liability valuation and capital requirements for annuities and term cover.

Surfaces hold one-year death probabilities ``q`` over (age, year), with an
optional leading path axis for scenario sets. Valuation walks the cohort
diagonal starting at the issue age and issue year.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError

LONGEVITY_FACTOR = 0.8
MORTALITY_FACTOR = 1.15
CATASTROPHE_ADDON = 0.0015
VAR_LEVEL = 0.995
MIN_SCENARIOS = 1000


@dataclass(frozen=True)
class AnnuityContract:
    """Immediate life annuity paying ``payout`` at the end of each year survived."""

    issue_age: int
    issue_year: int
    payout: float = 10_000.0
    max_age: int = 120
    interest: float = 0.02

    def __post_init__(self):
        if not self.issue_age < self.max_age:
            raise ValidationError("issue age must be below the maximum age")
        if not self.interest > -1:
            raise ValidationError("interest rate must exceed -1")

    @property
    def term(self) -> int:
        return self.max_age - self.issue_age


@dataclass(frozen=True)
class TermLifeContract:
    """Death benefit paid at the end of the year of death before ``terminal_age``."""

    issue_age: int
    issue_year: int
    terminal_age: int = 65
    benefit: float = 150_000.0
    interest: float = 0.02

    def __post_init__(self):
        if not self.issue_age < self.terminal_age:
            raise ValidationError("issue age must be below the terminal age")
        if not self.interest > -1:
            raise ValidationError("interest rate must exceed -1")

    @property
    def term(self) -> int:
        return self.terminal_age - self.issue_age


@dataclass(frozen=True)
class MortalitySurface:
    """Death probabilities over (age, year), or (path, age, year) for scenarios."""

    ages: np.ndarray
    years: np.ndarray
    q: np.ndarray
    provenance: str = "best-estimate"
    kannisto: np.ndarray | None = None  # (..., 2, n_years): log c and slope per year
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.shape[-2:] != (len(self.ages), len(self.years)):
            raise ValidationError("surface shape does not match its ages and years")
        if np.any(q < 0) or np.any(q > 1) or not np.isfinite(q).all():
            raise ValidationError("death probabilities must lie in [0, 1]")

    def with_q(self, q, provenance: str) -> "MortalitySurface":
        return MortalitySurface(self.ages, self.years, np.asarray(q, dtype=float), provenance, self.kannisto)


# ---------------------------------------------------------------------------
# old-age closing


def kannisto_fit(mu, ages) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of ``logit(mu) = log c + g * age`` along the age axis.

    ``mu`` has ages on axis ``-2``; returns ``(log_c, g)`` with the age axis
    removed.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(~(mu > 0)) or np.any(mu >= 1):
        raise ValidationError("force of mortality on the fit ages must lie in (0, 1)")
    x = np.asarray(ages, dtype=float)
    y = np.log(mu) - np.log1p(-mu)
    xc = x - x.mean()
    slope = np.tensordot(xc, y - y.mean(axis=-2, keepdims=True), axes=([0], [-2])) / np.dot(xc, xc)
    intercept = y.mean(axis=-2) - slope * x.mean()
    return intercept, slope


def kannisto_mu(log_c, slope, ages) -> np.ndarray:
    """Logistic force of mortality, ages on axis ``-2``."""
    ages = np.asarray(ages, dtype=float)
    eta = np.asarray(log_c)[..., None, :] + np.asarray(slope)[..., None, :] * ages[:, None]
    return 1.0 / (1.0 + np.exp(-eta))


def close_kannisto(mu, ages, fit_ages: Sequence[int] | None = None, extend_to: int = 120):
    """Extend a force-of-mortality surface to ``extend_to`` with a logistic tail.

    Parameters
    ----------
    mu : (..., n_ages, n_years) force of mortality on consecutive ``ages``.
    fit_ages : ages used for the fit; default the last ten ages.

    Returns
    -------
    ages_out, mu_out, params : ``params`` stacks ``(log c, slope)`` per year
        on axis ``-2``. Model ages keep their values; only older ages are
        filled.
    """
    mu = np.asarray(mu, dtype=float)
    ages = np.asarray(ages)
    if fit_ages is None:
        fit_ages = ages[-10:]
    fit_ages = np.asarray(fit_ages)
    idx = np.searchsorted(ages, fit_ages)
    if np.any(idx >= ages.size) or np.any(ages[np.minimum(idx, ages.size - 1)] != fit_ages):
        raise ValidationError("Kannisto fit ages must be model ages")
    if fit_ages.size < 2:
        raise ValidationError("Kannisto closing needs at least two fit ages")
    if np.any(~(mu[..., idx, :] > 0)):
        raise ValidationError("non-positive force of mortality on the Kannisto fit ages")
    log_c, slope = kannisto_fit(mu[..., idx, :], fit_ages)
    extra = np.arange(int(ages[-1]) + 1, int(extend_to) + 1)
    tail = kannisto_mu(log_c, slope, extra)
    out = np.concatenate([mu, tail], axis=-2) if extra.size else mu.copy()
    return np.concatenate([ages, extra]), out, np.stack([log_c, slope], axis=-2)


def closed_surface(mu, ages, years, fit_ages=None, extend_to: int = 120, provenance="best-estimate"):
    """Kannisto-closed :class:`MortalitySurface` from a force-of-mortality array."""
    ages_out, mu_out, params = close_kannisto(mu, ages, fit_ages, extend_to)
    return MortalitySurface(ages_out, np.asarray(years), -np.expm1(-mu_out), provenance, params)


# ---------------------------------------------------------------------------
# valuation


def _diagonal(surface: MortalitySurface, age: int, year: int, n: int) -> np.ndarray:
    """``q`` at (age + j, year + j) for j < n, with any path axis kept in front."""
    ages, years = np.asarray(surface.ages), np.asarray(surface.years)
    a0 = int(age) - int(ages[0])
    y0 = int(year) - int(years[0])
    if n <= 0:
        return np.zeros(np.shape(surface.q)[:-2] + (0,))
    if a0 < 0 or y0 < 0 or a0 + n > ages.size or y0 + n > years.size:
        raise ValidationError(
            f"surface ({ages[0]}-{ages[-1]} x {years[0]}-{years[-1]}) does not cover "
            f"ages {age}-{age + n - 1} in years {year}-{year + n - 1}"
        )
    q = np.asarray(surface.q)
    j = np.arange(n)
    return q[..., a0 + j, y0 + j]


def survival_curve(surface: MortalitySurface, age: int, start_year: int, n: int) -> np.ndarray:
    """``k p`` for k = 0..n along the cohort diagonal."""
    diag = _diagonal(surface, age, start_year, n)
    surv = np.cumprod(1.0 - diag, axis=-1)
    ones = np.ones(diag.shape[:-1] + (1,))
    return np.concatenate([ones, surv], axis=-1)


def _pv(flows: np.ndarray, interest: float):
    """Present value of end-of-year flows; same reduction with or without a path axis."""
    v = (1.0 + interest) ** -np.arange(1, flows.shape[-1] + 1, dtype=float)
    return np.sum(np.ascontiguousarray(flows * v), axis=-1)


def bel_annuity(contract: AnnuityContract, surface: MortalitySurface):
    """``payout * sum_{k>=1} v^k k p``; one value per path for scenario surfaces."""
    n = contract.term
    kp = survival_curve(surface, contract.issue_age, contract.issue_year, n)
    return contract.payout * _pv(kp[..., 1:], contract.interest)


def bel_term(contract: TermLifeContract, surface: MortalitySurface):
    """``benefit * sum_{k>=1} v^k (k-1) p q_{x+k-1}``."""
    n = contract.term
    diag = _diagonal(surface, contract.issue_age, contract.issue_year, n)
    kp = survival_curve(surface, contract.issue_age, contract.issue_year, n)
    return contract.benefit * _pv(kp[..., :-1] * diag, contract.interest)


def bel(contract, surface: MortalitySurface):
    if isinstance(contract, AnnuityContract):
        return bel_annuity(contract, surface)
    if isinstance(contract, TermLifeContract):
        return bel_term(contract, surface)
    raise ValidationError(f"unsupported contract type {type(contract).__name__}")


# ---------------------------------------------------------------------------
# standard-model capital


def scr_standard_annuity(contract: AnnuityContract, best_estimate: MortalitySurface) -> float:
    """Capital for a permanent fall of all future death probabilities by 20%."""
    shocked = best_estimate.with_q(LONGEVITY_FACTOR * np.asarray(best_estimate.q), "shocked")
    return float(max(bel_annuity(contract, shocked) - bel_annuity(contract, best_estimate), 0.0))


def scr_standard_term(contract: TermLifeContract, best_estimate: MortalitySurface) -> dict:
    """Mortality (x1.15, capped at 1) and first-year catastrophe (+0.0015) shocks.

    Returns the two components and their root-sum-of-squares aggregate.
    """
    q = np.asarray(best_estimate.q, dtype=float)
    base = bel_term(contract, best_estimate)
    mort = bel_term(contract, best_estimate.with_q(np.minimum(MORTALITY_FACTOR * q, 1.0), "shocked"))
    cat_q = q.copy()
    a0 = contract.issue_age - int(best_estimate.ages[0])
    y0 = contract.issue_year - int(best_estimate.years[0])
    if not (0 <= a0 < q.shape[-2] and 0 <= y0 < q.shape[-1]):
        raise ValidationError("surface does not cover the issue age and year")
    cat_q[..., a0, y0] = np.minimum(cat_q[..., a0, y0] + CATASTROPHE_ADDON, 1.0)
    cat = bel_term(contract, best_estimate.with_q(cat_q, "shocked"))
    scr_mort = float(mort - base)
    scr_cat = float(cat - base)
    return {"mortality": scr_mort, "catastrophe": scr_cat, "total": aggregate_scr(scr_mort, scr_cat)}


def aggregate_scr(*components: float) -> float:
    """Root-sum-of-squares aggregation of independent sub-module charges."""
    return math.sqrt(sum(float(c) ** 2 for c in components))


# ---------------------------------------------------------------------------
# run-off value at risk


def upper_order_statistic(values, level: float = VAR_LEVEL, min_count: int = MIN_SCENARIOS) -> float:
    """Sorted ascending value at 1-based position ``ceil(level * n)``."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = v.size
    if n < min_count:
        raise ValidationError(f"need at least {min_count} scenarios for the {level} quantile, got {n}")
    k = math.ceil(level * n - 1e-9)
    return float(v[max(k, 1) - 1])


def scr_runoff(contract, scenarios: MortalitySurface, best_estimate: MortalitySurface,
               level: float = VAR_LEVEL, min_count: int = MIN_SCENARIOS) -> float:
    """High quantile of scenario liabilities minus the best-estimate liability.

    For annuities the upper tail comes from strong improvement, for term
    cover from heavy mortality; both are the upper tail of the liability.
    """
    liabilities = np.atleast_1d(bel(contract, scenarios))
    return upper_order_statistic(liabilities, level, min_count) - float(bel(contract, best_estimate))


# ---------------------------------------------------------------------------
# reporting

REPORT_COLUMNS = (
    "contract", "issue_age", "bel0", "scr_standard", "scr_runoff",
    "standard_longevity", "standard_mortality", "standard_catastrophe",
)


def scr_rows(contracts, scenarios: MortalitySurface | None, best_estimate: MortalitySurface,
             min_count: int = MIN_SCENARIOS) -> list[dict]:
    rows = []
    for c in contracts:
        row = {"issue_age": c.issue_age, "bel0": float(bel(c, best_estimate))}
        if isinstance(c, AnnuityContract):
            std = scr_standard_annuity(c, best_estimate)
            row.update(contract="annuity", scr_standard=std, standard_longevity=std)
        else:
            parts = scr_standard_term(c, best_estimate)
            row.update(contract="term", scr_standard=parts["total"],
                       standard_mortality=parts["mortality"], standard_catastrophe=parts["catastrophe"])
        if scenarios is not None:
            row["scr_runoff"] = scr_runoff(c, scenarios, best_estimate, min_count=min_count)
        rows.append(row)
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(REPORT_COLUMNS) + "\n")
    for row in rows:
        cells = []
        for col in REPORT_COLUMNS:
            v = row.get(col, "")
            cells.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()
