"""Synthetic multi-country deaths/exposures for tests and demos.

The generator draws a common two-factor improvement trend, small
country-specific deviations and a few paired level shocks, then produces
Poisson death counts (or their means when ``noise=False``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CountrySeries


@dataclass(frozen=True)
class SyntheticTruth:
    ages: np.ndarray
    years: np.ndarray
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray  # (2, n_years - 1)
    shock_years: tuple[int, ...]


def make_fixture(
    seed: int = 0,
    n_countries: int = 3,
    age_min: int = 60,
    n_ages: int = 10,
    year_min: int = 1980,
    n_years: int = 40,
    exposure_scale: float = 2e5,
    noise: bool = True,
    shock_years: tuple[int, ...] | None = None,
    shock_size: float = 0.15,
) -> tuple[list[CountrySeries], dict[str, int], SyntheticTruth]:
    """Generate ``n_countries`` series with staggered entry years.

    The first two countries enter in ``year_min``; later ones a quarter of
    the window afterwards. ``shock_years`` raises all log rates in those
    years by ``shock_size`` times a loading (default: two years near the
    middle of the window).
    """
    rng = np.random.default_rng(seed)
    ages = np.arange(age_min, age_min + n_ages)
    years = np.arange(year_min, year_min + n_years)
    u = (ages - ages[0]) / max(n_ages - 1, 1)
    A = -0.012 - 0.006 * u
    B1 = 1.0 + 0.5 * u
    B2 = u - u.mean()
    B = np.vstack([B1 / np.linalg.norm(B1), B2 / np.linalg.norm(B2)])
    K = np.vstack([
        rng.normal(0.0, 0.03, n_years - 1),
        rng.normal(0.0, 0.02, n_years - 1),
    ])
    if shock_years is None:
        shock_years = (int(years[n_years // 3]), int(years[2 * n_years // 3]))
    shock_load = 1.0 + 0.5 * (1 - u)
    shock_load = shock_load / np.linalg.norm(shock_load) * np.sqrt(n_ages)
    level_shock = np.zeros((n_ages, n_years))
    for y in shock_years:
        level_shock[:, int(y) - year_min] += shock_size * shock_load

    codes = [f"C{c + 1:02d}" for c in range(n_countries)]
    entry = {code: year_min if c < 2 else year_min + n_years // 4 for c, code in enumerate(codes)}
    series = []
    for c, code in enumerate(codes):
        anchor = -4.6 + 0.095 * (ages - age_min) + rng.normal(0.0, 0.05)
        beta = np.vstack([np.linspace(1.0, 0.5, n_ages), np.linspace(-1.0, 1.0, n_ages)])
        beta /= np.linalg.norm(beta, axis=1, keepdims=True)
        kappa = rng.normal(0.0, 0.008, (2, n_years - 1))
        improvement = A[:, None] + B.T @ K + beta.T @ kappa
        log_m = anchor[:, None] + np.hstack([np.zeros((n_ages, 1)), np.cumsum(improvement, axis=1)])
        log_m = log_m + level_shock
        expo = exposure_scale * (1.0 + 0.3 * c) * np.exp(-0.02 * (ages - age_min))[:, None]
        expo = np.broadcast_to(expo, log_m.shape).copy()
        mean = expo * np.exp(log_m)
        deaths = rng.poisson(mean).astype(float) if noise else mean
        first = entry[code]
        series.append(CountrySeries(code, ages.copy(), years.copy(), deaths, expo, first))
    truth = SyntheticTruth(ages, years, A, B, K, tuple(int(y) for y in shock_years))
    return series, entry, truth


def write_fixture(directory: str | Path, seed: int = 0, **kwargs) -> Path:
    """Write one CSV per country plus ``config.json`` ready for the pipeline."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    series, entry, _ = make_fixture(seed=seed, **kwargs)
    countries = []
    for s in series:
        path = out / f"{s.country_code}.csv"
        rows = ["Year,Age,Deaths,Exposure"]
        for j, y in enumerate(s.years):
            if y < entry[s.country_code]:
                continue
            for i, a in enumerate(s.ages):
                rows.append(f"{int(y)},{int(a)},{float(s.deaths[i, j])!r},{float(s.exposures[i, j])!r}")
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        countries.append({"code": s.country_code, "path": path.name, "entry_year": entry[s.country_code]})
    ages, years = series[0].ages, series[0].years
    # target is a founding member so its data covers the whole window
    target = series[0].country_code
    n_ages = ages.size
    half = int(ages[0]) + n_ages // 2
    # decay selection needs 50 years of history before its first evaluation
    if years.size - 1 > 51:
        dynamics = {"first_eval_year": int(years[1]) + 50}
    else:
        dynamics = {"gamma": 0.97}
    config = {
        "data": {
            "countries": countries,
            "age_min": int(ages[0]),
            "age_max": int(ages[-1]),
            "year_min": int(years[0]),
            "year_max": int(years[-1]),
            "target_country": target,
        },
        "outliers": {"epoch_split_year": None, "a_priori_exclusions": []},
        "regime": {
            "age_groups": [[int(ages[0]), half - 1], [half, int(ages[-1])]],
            "epoch_year": int(years[0]) + years.size // 2,
            "seed": seed + 1,
            "max_generations": 300,
        },
        "dynamics": dynamics,
        "projection": {"horizon": 40, "n_paths": 1000, "seed": seed + 2, "forced_states": {}},
        "scr": {
            "annuity_issue_ages": [int(ages[0]) + 5],
            "term_issue_ages": [int(ages[0])],
            "terminal_age": int(ages[0]) + 5,
            "max_age": int(ages[0]) + 40,
        },
        "output_dir": "artifacts",
    }
    (out / "config.json").write_text(json.dumps(config, indent=2), encoding="utf-8")
    return out
