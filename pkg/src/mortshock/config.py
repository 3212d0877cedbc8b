"""Pipeline configuration: one JSON file with a section per stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .dynamics import DEFAULT_GAMMA_GRID
from .errors import ValidationError
from .outliers import DEFAULT_EXCLUSIONS


@dataclass(frozen=True)
class CountryEntry:
    code: str
    path: str
    entry_year: int


@dataclass(frozen=True)
class DataSection:
    countries: tuple[CountryEntry, ...]
    age_min: int
    age_max: int
    year_min: int
    year_max: int
    target_country: str


@dataclass(frozen=True)
class BaselineSection:
    m: int = 2
    l: int = 2  # noqa: E741
    tol: float = 1e-10
    max_iter: int = 5000
    constraint_tol: float = 1e-8
    impute_window: int = 4


@dataclass(frozen=True)
class OutlierSection:
    quantile: float = 0.99
    epoch_split_year: int | None = None
    a_priori_exclusions: tuple[int, ...] = DEFAULT_EXCLUSIONS
    seed: int = 0


@dataclass(frozen=True)
class RegimeSection:
    age_groups: tuple[tuple[int, int], ...] = ()
    year_weights: dict = field(default_factory=dict)
    epoch_year: int = 1970
    seed: int = 0
    max_generations: int = 3000
    rel_tol: float = 1e-5
    max_rounds: int = 20


@dataclass(frozen=True)
class DynamicsSection:
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID
    first_eval_year: int | None = None
    gamma: float | None = None  # fixed decay; skips the grid search


@dataclass(frozen=True)
class ProjectionSection:
    horizon: int = 59
    n_paths: int = 10_000
    seed: int = 0
    forced_states: dict = field(default_factory=dict)  # group label -> {year: "LVS" | "HVS"}
    shock_mean: Any = "zero"
    carry_open_run: bool = True


@dataclass(frozen=True)
class ScrSection:
    annuity_issue_ages: tuple[int, ...] = (65,)
    term_issue_ages: tuple[int, ...] = (40,)
    payout: float = 10_000.0
    benefit: float = 150_000.0
    interest: float = 0.02
    max_age: int = 120
    terminal_age: int = 65
    fit_ages: tuple[int, int] | None = None
    min_scenarios: int = 1000


@dataclass(frozen=True)
class PipelineConfig:
    data: DataSection
    baseline: BaselineSection = BaselineSection()
    outliers: OutlierSection = OutlierSection()
    regime: RegimeSection = RegimeSection()
    dynamics: DynamicsSection = DynamicsSection()
    projection: ProjectionSection = ProjectionSection()
    scr: ScrSection = ScrSection()
    output_dir: str = "artifacts"
    base_dir: str = field(default=".", compare=False)

    @property
    def ages(self) -> range:
        return range(self.data.age_min, self.data.age_max + 1)

    @property
    def group_ranges(self) -> tuple[tuple[int, int], ...]:
        return self.regime.age_groups or ((self.data.age_min, self.data.age_max),)

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.output_dir)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        out["regime"]["age_groups"] = [list(g) for g in self.regime.age_groups]
        out["projection"]["forced_states"] = {
            g: {str(y): s for y, s in sorted(m.items())} for g, m in sorted(self.projection.forced_states.items())
        }
        return _lists(out)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown keys in section '{name}': {sorted(unknown)}")
    return raw


def _int_tuple(values) -> tuple[int, ...]:
    return tuple(int(v) for v in values)


def parse_config(raw: dict, base_dir: str | Path = ".") -> PipelineConfig:
    """Build and validate a :class:`PipelineConfig` from a JSON-like dict."""
    if not isinstance(raw, dict) or "data" not in raw:
        raise ValidationError("configuration needs a 'data' section")
    top_known = {"data", "baseline", "outliers", "regime", "dynamics", "projection", "scr", "output_dir"}
    unknown = set(raw) - top_known
    if unknown:
        raise ValidationError(f"unknown configuration sections: {sorted(unknown)}")
    d = _section(DataSection, raw["data"], "data")
    try:
        countries = tuple(CountryEntry(str(c["code"]), str(c["path"]), int(c["entry_year"])) for c in d["countries"])
        data = DataSection(countries, int(d["age_min"]), int(d["age_max"]), int(d["year_min"]),
                           int(d["year_max"]), str(d["target_country"]))
    except KeyError as exc:
        raise ValidationError(f"data section is missing {exc}") from None
    if data.age_min > data.age_max or data.year_min >= data.year_max:
        raise ValidationError("empty age or year window")
    if data.target_country not in {c.code for c in countries}:
        raise ValidationError(f"target country {data.target_country} is not listed")

    b = BaselineSection(**_section(BaselineSection, raw.get("baseline"), "baseline"))

    o = _section(OutlierSection, raw.get("outliers"), "outliers")
    if "a_priori_exclusions" in o:
        o["a_priori_exclusions"] = _int_tuple(o["a_priori_exclusions"])
    outliers = OutlierSection(**o)
    if not 0 < outliers.quantile < 1:
        raise ValidationError("outlier quantile must lie in (0, 1)")

    r = _section(RegimeSection, raw.get("regime"), "regime")
    if "age_groups" in r:
        r["age_groups"] = tuple((int(g[0]), int(g[1])) for g in r["age_groups"])
    r["year_weights"] = {str(k): float(v) for k, v in (r.get("year_weights") or {}).items()}
    regime = RegimeSection(**r)

    dy = _section(DynamicsSection, raw.get("dynamics"), "dynamics")
    if "gamma_grid" in dy:
        dy["gamma_grid"] = tuple(float(g) for g in dy["gamma_grid"])
    dynamics = DynamicsSection(**dy)

    p = _section(ProjectionSection, raw.get("projection"), "projection")
    p["forced_states"] = {
        str(g): {int(y): str(s).upper() for y, s in states.items()}
        for g, states in (p.get("forced_states") or {}).items()
    }
    projection = ProjectionSection(**p)

    s = _section(ScrSection, raw.get("scr"), "scr")
    for key in ("annuity_issue_ages", "term_issue_ages"):
        if key in s:
            s[key] = _int_tuple(s[key])
    if s.get("fit_ages") is not None:
        s["fit_ages"] = tuple(int(v) for v in s["fit_ages"])
    scr = ScrSection(**s)

    cfg = PipelineConfig(data, b, outliers, regime, dynamics, projection, scr,
                         str(raw.get("output_dir", "artifacts")), str(base_dir))
    _check_groups(cfg)
    return cfg


def _check_groups(cfg: PipelineConfig) -> None:
    groups = sorted(cfg.group_ranges)
    covered = []
    for lo, hi in groups:
        if lo > hi:
            raise ValidationError(f"age group {lo}-{hi} is empty")
        covered.extend(range(lo, hi + 1))
    if sorted(covered) != list(cfg.ages) or len(set(covered)) != len(covered):
        raise ValidationError("age groups must cover the age window disjointly")
    labels = {f"{lo}-{hi}" for lo, hi in groups}
    for label in cfg.projection.forced_states:
        if label not in labels:
            raise ValidationError(f"forced states refer to unknown age group {label}")


def load_config(path: str | Path, check_paths: bool = True) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"configuration file {path} does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    cfg = parse_config(raw, path.parent)
    if check_paths:
        for c in cfg.data.countries:
            if not cfg.resolve(c.path).exists():
                raise ValidationError(f"data file for {c.code} not found: {cfg.resolve(c.path)}")
    return cfg
