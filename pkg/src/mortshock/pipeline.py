"""Stage runner: every stage reads its predecessors' files and writes its own.

Artifacts live in ``<output_dir>/<stage>/`` together with a ``run_manifest.json``
holding the configuration hash, seeds, library versions and a SHA-256 of
every file the stage wrote. Nothing time-dependent is recorded, so an
unchanged rerun rewrites identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy

from . import __version__
from .baseline import fit_baseline, load_baseline, save_baseline, to_improvement_form
from .config import PipelineConfig
from .data import CountrySeries, MortalityPanel, build_panel, load_country_table
from .dynamics import (
    fit_weighted_gaussian,
    load_dynamics,
    save_dynamics,
    select_decay,
    stack_period_effects,
)
from .errors import MissingArtifactError, ValidationError
from .outliers import detect_outliers, detrend_period_effects, load_outlier_years, save_report
from .projection import (
    GroupShockModel,
    load_scenarios,
    open_run_carry_in,
    project_scenarios,
    quantile_summary_csv,
    save_scenarios,
)
from .regime import (
    RegimeFitConfig,
    compute_residuals,
    fit_regime,
    load_filtered,
    load_regime,
    save_filtered,
    save_regime,
    year_weights,
)
from .scr import AnnuityContract, TermLifeContract, closed_surface, report_csv, scr_rows

log = logging.getLogger(__name__)

STAGES = ("ingest", "baseline", "outliers", "rebaseline", "regime", "dynamics", "project", "scr")
THREADS_ENV = "MORTSHOCK_THREADS"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be at least 1")
    return n


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.out_path / stage


def _require(cfg: PipelineConfig, stage: str) -> Path:
    d = _stage_dir(cfg, stage)
    if not (d / "run_manifest.json").exists():
        raise MissingArtifactError(f"artifacts of stage '{stage}' not found in {d}; run stage '{stage}' first")
    return d


def _write_manifest(cfg: PipelineConfig, stage: str, seeds: dict | None = None, extra: dict | None = None) -> None:
    d = _stage_dir(cfg, stage)
    files = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    manifest = {
        "stage": stage,
        "config_sha256": cfg.sha256(),
        "seeds": seeds or {},
        "versions": {
            "mortshock": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "artifacts": {str(p.relative_to(d)): _sha(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    (d / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# panel storage


def _load_panel_from_sources(cfg: PipelineConfig) -> MortalityPanel:
    d = cfg.data
    ar, yr = (d.age_min, d.age_max), (d.year_min, d.year_max)
    series = [load_country_table(cfg.resolve(c.path), c.code, ar, yr) for c in d.countries]
    entry = {c.code: c.entry_year for c in d.countries}
    return build_panel(series, entry, ar, yr)


def save_panel(panel: MortalityPanel, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rows = ["country,year,age,deaths,exposure"]
    for code in sorted(panel.countries):
        s = panel.countries[code]
        for j, y in enumerate(s.years):
            for i, a in enumerate(s.ages):
                rows.append(f"{code},{int(y)},{int(a)},{float(s.deaths[i, j])!r},{float(s.exposures[i, j])!r}")
    (directory / "panel.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    meta = {
        "ages": [int(panel.ages[0]), int(panel.ages[-1])],
        "years": [int(panel.years[0]), int(panel.years[-1])],
        "entry_years": {k: int(v) for k, v in sorted(panel.entry_years.items())},
    }
    (directory / "panel.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_panel(directory: Path) -> MortalityPanel:
    meta = json.loads((directory / "panel.json").read_text(encoding="utf-8"))
    ages = np.arange(meta["ages"][0], meta["ages"][1] + 1)
    years = np.arange(meta["years"][0], meta["years"][1] + 1)
    cells: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    with open(directory / "panel.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            code, y, a, dth, exp = line.rstrip("\n").split(",")
            if code not in cells:
                cells[code] = (np.full((ages.size, years.size), np.nan), np.full((ages.size, years.size), np.nan))
            i, j = int(a) - ages[0], int(y) - years[0]
            cells[code][0][i, j] = float(dth)
            cells[code][1][i, j] = float(exp)
    entry = {k: int(v) for k, v in meta["entry_years"].items()}
    series = [CountrySeries(code, ages, years, dd, ee, entry[code]) for code, (dd, ee) in sorted(cells.items())]
    return build_panel(series, entry, (int(ages[0]), int(ages[-1])), (int(years[0]), int(years[-1])))


# ---------------------------------------------------------------------------
# stages


def stage_ingest(cfg: PipelineConfig) -> None:
    panel = _load_panel_from_sources(cfg)
    save_panel(panel, _stage_dir(cfg, "ingest"))
    _write_manifest(cfg, "ingest")


def _fit(cfg: PipelineConfig, panel: MortalityPanel, active_years=None):
    b = cfg.baseline
    return fit_baseline(panel, cfg.data.target_country, active_years, b.m, b.l, b.tol, b.max_iter,
                        b.constraint_tol, b.impute_window)


def stage_baseline(cfg: PipelineConfig) -> None:
    panel = load_panel(_require(cfg, "ingest"))
    params = _fit(cfg, panel)
    save_baseline(params, _stage_dir(cfg, "baseline"))
    _write_manifest(cfg, "baseline")


def stage_outliers(cfg: PipelineConfig) -> None:
    params = load_baseline(_require(cfg, "baseline"))
    o = cfg.outliers
    remainders, _ = detrend_period_effects(params.years, params.common.L, o.a_priori_exclusions, o.epoch_split_year)
    report = detect_outliers(remainders, o.quantile, o.seed, o.epoch_split_year)
    save_report(report, _stage_dir(cfg, "outliers"))
    _write_manifest(cfg, "outliers", {"mcd": o.seed})


def stage_rebaseline(cfg: PipelineConfig) -> None:
    panel = load_panel(_require(cfg, "ingest"))
    flagged = set(load_outlier_years(_require(cfg, "outliers")))
    active = [int(y) for y in panel.years if int(y) not in flagged]
    params = _fit(cfg, panel, active)
    out = _stage_dir(cfg, "rebaseline")
    save_baseline(params, out)
    K, kappa = to_improvement_form(params)
    series = stack_period_effects(K, kappa)
    rows = ["year," + ",".join([f"K{i + 1}" for i in range(K.shape[0])] + [f"kappa{j + 1}" for j in range(kappa.shape[0])])]
    rows += [f"{int(y)}," + ",".join(repr(float(v)) for v in row) for y, row in zip(params.years[1:], series)]
    (out / "improvement_period_effects.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _write_manifest(cfg, "rebaseline")


def _label(group) -> str:
    return f"{group[0]}-{group[1]}"


def stage_regime(cfg: PipelineConfig) -> None:
    panel = load_panel(_require(cfg, "ingest"))
    params = load_baseline(_require(cfg, "rebaseline"))
    groups = cfg.group_ranges
    residuals = compute_residuals(panel, params, groups)
    out = _stage_dir(cfg, "regime")
    out.mkdir(parents=True, exist_ok=True)
    rows = ["age," + ",".join(str(int(y)) for y in residuals.years)]
    rows += [f"{int(a)}," + ",".join(repr(float(v)) for v in z) for a, z in zip(residuals.ages, residuals.z)]
    (out / "residuals.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    nu = year_weights(residuals.years, cfg.regime.year_weights)
    r = cfg.regime
    seeds = {_label(g): r.seed + k for k, g in enumerate(groups)}

    def fit_group(k_group):
        k, g = k_group
        fc = RegimeFitConfig(epoch_year=r.epoch_year, seed=r.seed + k, max_generations=r.max_generations,
                             rel_tol=r.rel_tol, max_rounds=r.max_rounds)
        return fit_regime(residuals.group(*g), nu, fc)

    threads = thread_count()
    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(fit_group, enumerate(groups)))
    else:
        fits = [fit_group(kg) for kg in enumerate(groups)]
    summary = {}
    for g, fit in zip(groups, fits):
        label = _label(g)
        save_regime(fit, out, f"group_{label}")
        save_filtered(residuals.years, fit.filter.filtered_probs, out / f"group_{label}_filtered.csv")
        summary[label] = {"loglik": fit.loglik, "rounds": fit.rounds}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    _write_manifest(cfg, "regime", seeds)


def stage_dynamics(cfg: PipelineConfig) -> None:
    params = load_baseline(_require(cfg, "rebaseline"))
    K, kappa = to_improvement_form(params)
    series = stack_period_effects(K, kappa)
    years = params.years[1:]
    dy = cfg.dynamics
    scores = None
    if dy.gamma is not None:
        gamma = float(dy.gamma)
    else:
        gamma, scores = select_decay(series, years, dy.gamma_grid, dy.first_eval_year, K.shape[0])
    dyn = fit_weighted_gaussian(series, gamma, K.shape[0])
    out = _stage_dir(cfg, "dynamics")
    out.mkdir(parents=True, exist_ok=True)
    save_dynamics(dyn, out / "dynamics.json", scores, dy.gamma_grid if scores is not None else None)
    _write_manifest(cfg, "dynamics")


def _read_residuals(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return raw[:, 0].astype(int), raw[:, 1:]


def _group_models(cfg: PipelineConfig, regime_dir: Path) -> list[GroupShockModel]:
    ages, z = _read_residuals(regime_dir / "residuals.csv")
    models = []
    for g in cfg.group_ranges:
        label = _label(g)
        params = load_regime(regime_dir, f"group_{label}")
        _, probs = load_filtered(regime_dir / f"group_{label}_filtered.csv")
        sel = (ages >= g[0]) & (ages <= g[1])
        carry = open_run_carry_in(z[sel], probs) if cfg.projection.carry_open_run else None
        forced = cfg.projection.forced_states.get(label, {})
        models.append(GroupShockModel(tuple(g), params, probs[-1], forced, carry))
    return models


def _anchor(panel: MortalityPanel, target: str) -> np.ndarray:
    s = panel.series(target)
    d, e = s.deaths[:, -1], s.exposures[:, -1]
    if np.any(~(d > 0)) or np.any(~(e > 0)):
        i = int(np.argmax(~(d > 0) | ~(e > 0)))
        raise ValidationError(f"crude rate at age {int(panel.ages[i])} in the last year is not positive")
    return np.log(d / e)


def stage_project(cfg: PipelineConfig) -> None:
    panel = load_panel(_require(cfg, "ingest"))
    params = load_baseline(_require(cfg, "rebaseline"))
    dyn = load_dynamics(_require(cfg, "dynamics") / "dynamics.json")
    groups = _group_models(cfg, _require(cfg, "regime"))
    anchor = _anchor(panel, cfg.data.target_country)
    p = cfg.projection
    sset = project_scenarios(params, dyn, groups, anchor, p.horizon, p.n_paths, p.seed, p.shock_mean,
                             threads=thread_count())
    best = project_scenarios(params, dyn, groups, anchor, p.horizon, 1, p.seed, p.shock_mean,
                             innovations=False, shocks=False)
    out = _stage_dir(cfg, "project")
    out.mkdir(parents=True, exist_ok=True)
    sset.metadata["config_sha256"] = cfg.sha256()
    save_scenarios(sset, out / "scenarios.bin")
    save_scenarios(best, out / "best_estimate.bin")
    (out / "quantiles.csv").write_text(quantile_summary_csv(sset), encoding="utf-8")
    _write_manifest(cfg, "project", {"projection": p.seed},
                    {"truncated_paths": sset.metadata["truncated_paths"]})


def _with_anchor(mu: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Prepend the last calibration year so contracts can start there."""
    lead = np.broadcast_to(np.exp(anchor)[:, None], mu.shape[:-2] + (anchor.size, 1))
    return np.concatenate([lead, mu], axis=-1)


def stage_scr(cfg: PipelineConfig) -> None:
    panel = load_panel(_require(cfg, "ingest"))
    proj = _require(cfg, "project")
    sset = load_scenarios(proj / "scenarios.bin")
    best = load_scenarios(proj / "best_estimate.bin")
    anchor = _anchor(panel, cfg.data.target_country)
    s = cfg.scr
    fit_ages = None if s.fit_ages is None else range(s.fit_ages[0], s.fit_ages[1] + 1)
    years = np.concatenate([[sset.years[0] - 1], sset.years])
    be = closed_surface(_with_anchor(best.mu[0], anchor), sset.ages, years, fit_ages, s.max_age)
    scen = closed_surface(_with_anchor(sset.mu, anchor), sset.ages, years, fit_ages, s.max_age, "scenario")
    issue_year = int(years[0])
    contracts = [AnnuityContract(a, issue_year, s.payout, s.max_age, s.interest) for a in s.annuity_issue_ages]
    contracts += [TermLifeContract(a, issue_year, s.terminal_age, s.benefit, s.interest) for a in s.term_issue_ages]
    rows = scr_rows(contracts, scen, be, s.min_scenarios)
    out = _stage_dir(cfg, "scr")
    out.mkdir(parents=True, exist_ok=True)
    (out / "scr_report.csv").write_text(report_csv(rows), encoding="utf-8")
    _write_manifest(cfg, "scr")


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "baseline": stage_baseline,
    "outliers": stage_outliers,
    "rebaseline": stage_rebaseline,
    "regime": stage_regime,
    "dynamics": stage_dynamics,
    "project": stage_project,
    "scr": stage_scr,
}


def parse_stages(text: str | Iterable[str] | None) -> list[str]:
    if text is None or text == "all":
        return list(STAGES)
    names = [s.strip() for s in (text.split(",") if isinstance(text, str) else text) if s.strip()]
    unknown = [s for s in names if s not in STAGES]
    if unknown:
        raise ValidationError(f"unknown stages {unknown}; choose from {', '.join(STAGES)}")
    return sorted(set(names), key=STAGES.index)


def run_pipeline(cfg: PipelineConfig, stages=None) -> list[str]:
    """Run the requested stages in pipeline order; returns the stages run."""
    todo = parse_stages(stages)
    cfg.out_path.mkdir(parents=True, exist_ok=True)
    (cfg.out_path / "config.json").write_text(cfg.dumps() + "\n", encoding="utf-8")
    for stage in todo:
        log.info("running stage %s", stage)
        STAGE_FUNCS[stage](cfg)
    return todo
