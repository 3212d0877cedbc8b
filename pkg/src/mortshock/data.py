"""Deaths/exposures ingestion and the aggregated multi-country panel.

Matrices are stored age-major: ``deaths[i, j]`` is the value at
``ages[i]`` and ``years[j]``. Missing cells are ``nan``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

REQUIRED_COLUMNS = ("Year", "Age", "Deaths", "Exposure")


@dataclass(frozen=True)
class CountrySeries:
    country_code: str
    ages: np.ndarray
    years: np.ndarray
    deaths: np.ndarray
    exposures: np.ndarray
    first_year_available: int

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.deaths) | np.isnan(self.exposures)

    def restrict(self, ages: Sequence[int], years: Sequence[int]) -> "CountrySeries":
        ai = _index_of(self.ages, ages, "age", self.country_code)
        yi = _index_of(self.years, years, "year", self.country_code)
        d = self.deaths[np.ix_(ai, yi)]
        e = self.exposures[np.ix_(ai, yi)]
        return CountrySeries(
            self.country_code,
            np.asarray(ages, dtype=int),
            np.asarray(years, dtype=int),
            d,
            e,
            _first_complete_year(np.asarray(years, dtype=int), d, e),
        )


@dataclass(frozen=True)
class MortalityPanel:
    """Per-country matrices plus their time-varying aggregate."""

    countries: dict[str, CountrySeries]
    ages: np.ndarray
    years: np.ndarray
    common_deaths: np.ndarray
    common_exposures: np.ndarray
    composition: dict[int, frozenset[str]]
    entry_years: dict[str, int] = field(default_factory=dict)

    @property
    def age_range(self) -> tuple[int, int]:
        return int(self.ages[0]), int(self.ages[-1])

    @property
    def year_range(self) -> tuple[int, int]:
        return int(self.years[0]), int(self.years[-1])

    def series(self, code: str) -> CountrySeries:
        try:
            return self.countries[code]
        except KeyError:
            raise ValidationError(f"country {code!r} is not part of the panel") from None

    def restrict(self, ages: Sequence[int], years: Sequence[int]) -> "MortalityPanel":
        """Sub-window of the panel; composition per year is unchanged."""
        sub = [s.restrict(ages, years) for s in self.countries.values()]
        return build_panel(sub, self.entry_years, (ages[0], ages[-1]), (years[0], years[-1]))


def _index_of(axis: np.ndarray, wanted: Iterable[int], what: str, code: str) -> np.ndarray:
    lookup = {int(v): i for i, v in enumerate(axis)}
    out = []
    for v in wanted:
        if int(v) not in lookup:
            raise ValidationError(f"{code}: {what} {v} outside the available range")
        out.append(lookup[int(v)])
    return np.asarray(out, dtype=int)


def _first_complete_year(years: np.ndarray, deaths: np.ndarray, exposures: np.ndarray) -> int:
    complete = ~(np.isnan(deaths) | np.isnan(exposures)).any(axis=0)
    if not complete.any():
        return int(years[-1]) + 1
    return int(years[np.argmax(complete)])


def _parse_int(raw: str, column: str, line: int) -> int:
    text = raw.strip()
    if text.endswith("+") or "-" in text[1:]:
        raise ParseError(f"open age interval {text!r} in column {column} is not supported", line)
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"column {column}: expected an integer, got {text!r}", line) from None


def _parse_float(raw: str, column: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"column {column}: expected a number, got {raw!r}", line) from None
    if not np.isfinite(value):
        raise ParseError(f"column {column}: non-finite value {raw!r}", line)
    return value


def load_country_table(
    path: str | Path,
    country_code: str,
    age_range: tuple[int, int] | None = None,
    year_range: tuple[int, int] | None = None,
) -> CountrySeries:
    """Read a flat ``Year,Age,Deaths,Exposure`` CSV for one country.

    Rows outside the optional window are ignored. Cells inside the window
    that the file does not provide are left as ``nan``.
    """
    cells: dict[tuple[int, int], tuple[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        missing_cols = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing_cols:
            raise ParseError(f"missing columns {missing_cols}", 1)
        col = {name: header.index(name) for name in REQUIRED_COLUMNS}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            year = _parse_int(row[col["Year"]], "Year", line)
            age = _parse_int(row[col["Age"]], "Age", line)
            deaths = _parse_float(row[col["Deaths"]], "Deaths", line)
            exposure = _parse_float(row[col["Exposure"]], "Exposure", line)
            if age_range is not None and not age_range[0] <= age <= age_range[1]:
                continue
            if year_range is not None and not year_range[0] <= year <= year_range[1]:
                continue
            if deaths < 0:
                raise ValidationError(
                    f"{country_code}: negative deaths {deaths} at (year={year}, age={age})"
                )
            if exposure <= 0:
                raise ValidationError(
                    f"{country_code}: non-positive exposure {exposure} at (year={year}, age={age})"
                )
            if (year, age) in cells:
                raise ParseError(f"duplicate cell (year={year}, age={age})", line)
            cells[(year, age)] = (deaths, exposure)

    if age_range is not None:
        ages = np.arange(age_range[0], age_range[1] + 1)
    elif cells:
        found = [a for _, a in cells]
        ages = np.arange(min(found), max(found) + 1)
    else:
        ages = np.arange(0)
    if year_range is not None:
        years = np.arange(year_range[0], year_range[1] + 1)
    elif cells:
        found = [y for y, _ in cells]
        years = np.arange(min(found), max(found) + 1)
    else:
        years = np.arange(0)

    deaths = np.full((ages.size, years.size), np.nan)
    exposures = np.full_like(deaths, np.nan)
    a0, y0 = (ages[0] if ages.size else 0), (years[0] if years.size else 0)
    for (year, age), (d, e) in cells.items():
        deaths[age - a0, year - y0] = d
        exposures[age - a0, year - y0] = e
    return CountrySeries(
        country_code, ages, years, deaths, exposures, _first_complete_year(years, deaths, exposures)
    )


def build_panel(
    series: Sequence[CountrySeries],
    entry_years: Mapping[str, int],
    age_range: tuple[int, int],
    year_range: tuple[int, int],
) -> MortalityPanel:
    """Aggregate countries into the common panel.

    A country joins the common trend from its entry year onwards and never
    leaves. Its data must be complete inside its active window.
    """
    if not series:
        raise ValidationError("at least one country is required")
    ages = np.arange(age_range[0], age_range[1] + 1)
    years = np.arange(year_range[0], year_range[1] + 1)
    restricted: dict[str, CountrySeries] = {}
    common_d = np.zeros((ages.size, years.size))
    common_e = np.zeros_like(common_d)
    entries: dict[str, int] = {}
    for s in series:
        code = s.country_code
        if code in restricted:
            raise ValidationError(f"country {code!r} listed twice")
        entry = int(entry_years.get(code, year_range[0]))
        entries[code] = entry
        active = years >= entry
        active_years = years[active]
        if active_years.size:
            sub = s.restrict(ages, active_years)
            holes = np.argwhere(sub.missing)
            if holes.size:
                i, j = holes[0]
                raise ValidationError(
                    f"{code}: missing cell (year={int(active_years[j])}, age={int(ages[i])}) "
                    f"inside its active window"
                )
            common_d[:, active] += sub.deaths
            common_e[:, active] += sub.exposures
        # keep the full window for the per-country view; inactive cells may be nan
        restricted[code] = _window(s, ages, years)
    composition = {
        int(t): frozenset(c for c, e in entries.items() if e <= t) for t in years
    }
    empty = [t for t, comp in composition.items() if not comp]
    if empty:
        raise ValidationError(f"no country contributes to year {empty[0]}")
    if (common_e <= 0).any():
        i, j = np.argwhere(common_e <= 0)[0]
        raise ValidationError(
            f"aggregated exposure is zero at (year={int(years[j])}, age={int(ages[i])})"
        )
    return MortalityPanel(restricted, ages, years, common_d, common_e, composition, entries)


def _window(s: CountrySeries, ages: np.ndarray, years: np.ndarray) -> CountrySeries:
    deaths = np.full((ages.size, years.size), np.nan)
    exposures = np.full_like(deaths, np.nan)
    a_lookup = {int(a): i for i, a in enumerate(s.ages)}
    y_lookup = {int(y): j for j, y in enumerate(s.years)}
    for i, a in enumerate(ages):
        si = a_lookup.get(int(a))
        if si is None:
            continue
        for j, y in enumerate(years):
            sj = y_lookup.get(int(y))
            if sj is not None:
                deaths[i, j] = s.deaths[si, sj]
                exposures[i, j] = s.exposures[si, sj]
    return CountrySeries(
        s.country_code, ages.copy(), years.copy(), deaths, exposures,
        _first_complete_year(years, deaths, exposures),
    )


def crude_death_rates(obj) -> np.ndarray:
    """Cellwise deaths / exposures.

    Accepts a ``MortalityPanel`` (uses the aggregated matrices), a
    ``CountrySeries`` or a ``(deaths, exposures)`` pair. Missing cells stay
    ``nan``; a zero or negative exposure is an error.
    """
    if isinstance(obj, MortalityPanel):
        d, e = obj.common_deaths, obj.common_exposures
    elif isinstance(obj, CountrySeries):
        d, e = obj.deaths, obj.exposures
    else:
        d, e = (np.asarray(v, dtype=float) for v in obj)
    bad = e <= 0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"non-positive exposure at cell {idx}")
    with np.errstate(invalid="ignore"):
        return d / e
