from __future__ import annotations

import numpy as np
import pytest

from mortshock.errors import ValidationError
from mortshock.scr import (
    AnnuityContract,
    MortalitySurface,
    TermLifeContract,
    aggregate_scr,
    bel_annuity,
    bel_term,
    close_kannisto,
    closed_surface,
    report_csv,
    scr_rows,
    scr_runoff,
    scr_standard_annuity,
    scr_standard_term,
    survival_curve,
    upper_order_statistic,
)


def flat_surface(value, ages, years):
    return MortalitySurface(np.asarray(ages), np.asarray(years), np.full((len(ages), len(years)), float(value)))


def toy_surface(qs, age=118, year=2021):
    """Diagonal surface where q at (age + j, year + j) equals qs[j]."""
    n = len(qs)
    q = np.zeros((n, n))
    for j, v in enumerate(qs):
        q[j, j] = v
    return MortalitySurface(np.arange(age, age + n), np.arange(year, year + n), q)


# ---------------------------------------------------------------------------
# Kannisto closing


def test_kannisto_model_in_model_out():
    ages = np.arange(76, 86)
    c, g = 1e-5, 0.11
    true = lambda x: c * np.exp(g * x) / (1 + c * np.exp(g * x))  # noqa: E731
    mu = np.tile(true(ages)[:, None], (1, 3))
    out_ages, out, params = close_kannisto(mu, ages, extend_to=120)
    assert out_ages[-1] == 120 and out.shape == (45, 3)
    assert np.max(np.abs(out - true(out_ages)[:, None])) < 1e-10
    assert np.allclose(params[0], np.log(c)) and np.allclose(params[1], g)


def test_kannisto_constant_input_is_flat():
    mu = np.full((10, 2), 0.2)
    _, out, params = close_kannisto(mu, np.arange(76, 86))
    assert np.allclose(params[1], 0.0, atol=1e-14)
    assert np.allclose(out, 0.2, rtol=1e-12)


def test_kannisto_bounded_and_increasing():
    rng = np.random.default_rng(0)
    ages = np.arange(76, 86)
    for _ in range(50):
        mu = np.exp(-4 + 0.09 * (ages - 76) + rng.normal(0, 0.02, 10))[:, None]
        _, out, params = close_kannisto(mu, ages)
        assert params[1, 0] > 0
        assert np.all(np.diff(out[10:, 0]) > 0) and out[-1, 0] < 1.0


def test_kannisto_splice_is_continuous():
    ages = np.arange(60, 86)
    mu = np.exp(-5 + 0.1 * (ages - 60))[:, None]
    _, out, params = close_kannisto(mu, ages)
    # logit at the splice age sits on the fitted line within the fit residuals
    resid = np.log(mu[-10:, 0] / (1 - mu[-10:, 0])) - (params[0, 0] + params[1, 0] * ages[-10:])
    fitted_85 = params[0, 0] + params[1, 0] * 85
    assert abs(np.log(out[25, 0] / (1 - out[25, 0])) - fitted_85) <= np.abs(resid).max() + 1e-12
    assert out[26, 0] / out[25, 0] == pytest.approx(np.exp(0.1), rel=0.02)


def test_kannisto_rejects_non_positive():
    mu = np.full((10, 1), 0.1)
    mu[3] = 0.0
    with pytest.raises(ValidationError, match="non-positive"):
        close_kannisto(mu, np.arange(76, 86))


def test_kannisto_path_axis():
    ages = np.arange(76, 86)
    mu = np.exp(-4 + 0.1 * (ages - 76))[None, :, None] * np.array([1.0, 1.2])[:, None, None]
    _, out, _ = close_kannisto(np.broadcast_to(mu, (2, 10, 4)), ages)
    _, single, _ = close_kannisto(mu[1], ages)
    assert out.shape == (2, 45, 4)
    assert np.allclose(out[1], single, rtol=1e-14)


# ---------------------------------------------------------------------------
# survival and BEL


def test_survival_hand_product():
    kp = survival_curve(toy_surface([0.1, 0.2, 0.3], age=50), 50, 2021, 3)
    assert kp.tolist() == pytest.approx([1.0, 0.9, 0.72, 0.504], abs=1e-15)
    assert np.all(survival_curve(flat_surface(0.0, range(50, 60), range(2021, 2031)), 50, 2021, 10) == 1.0)
    zero = survival_curve(flat_surface(1.0, range(50, 60), range(2021, 2031)), 50, 2021, 10)
    assert zero[0] == 1.0 and np.all(zero[1:] == 0.0)


def test_annuity_toy_and_certain():
    c = AnnuityContract(118, 2021, payout=1.0, max_age=120, interest=0.0)
    assert bel_annuity(c, toy_surface([0.1, 0.2])) == pytest.approx(1.62, abs=1e-12)
    assert bel_annuity(c, toy_surface([1.0, 0.2])) == 0.0
    c2 = AnnuityContract(90, 2021, payout=10_000, max_age=120, interest=0.02)
    q0 = flat_surface(0.0, range(90, 120), range(2021, 2051))
    v = 1 / 1.02
    assert bel_annuity(c2, q0) == pytest.approx(10_000 * (1 - v**30) / 0.02, rel=1e-13)


def test_term_toy():
    c = TermLifeContract(63, 2021, terminal_age=65, benefit=1.0, interest=0.0)
    assert bel_term(c, toy_surface([0.1, 0.2], age=63)) == pytest.approx(0.28, abs=1e-12)
    assert bel_term(c, toy_surface([1.0, 0.5], age=63)) == pytest.approx(1.0, abs=1e-15)
    assert bel_term(c, toy_surface([0.0, 0.0], age=63)) == 0.0


def test_standard_annuity_toy():
    c = AnnuityContract(118, 2021, payout=1.0, max_age=120, interest=0.0)
    assert scr_standard_annuity(c, toy_surface([0.1, 0.2])) == pytest.approx(1.6928 - 1.62, abs=1e-12)
    assert scr_standard_annuity(c, toy_surface([0.0, 0.0])) == 0.0


def test_standard_term_catastrophe_one_year():
    c = TermLifeContract(64, 2021, terminal_age=65, benefit=150_000, interest=0.02)
    parts = scr_standard_term(c, flat_surface(0.0, [64], [2021]))
    assert parts["mortality"] == 0.0
    assert parts["catastrophe"] == pytest.approx(150_000 * 0.0015 / 1.02, rel=1e-14)
    assert parts["total"] == pytest.approx(parts["catastrophe"], rel=1e-15)


def test_standard_term_caps_and_first_year_only():
    c = TermLifeContract(60, 2021, terminal_age=65, benefit=1.0, interest=0.0)
    s = flat_surface(0.9, range(60, 65), range(2021, 2026))
    parts = scr_standard_term(c, s)
    # 1.15 * 0.9 > 1 is capped: everybody dies in year one
    assert parts["mortality"] == pytest.approx(1.0 - bel_term(c, s), abs=1e-15)
    # catastrophe shifts only the first-year probability
    q = np.full(5, 0.9)
    q[0] += 0.0015
    kp = np.concatenate([[1.0], np.cumprod(1 - q)])
    assert parts["catastrophe"] == pytest.approx(np.sum(kp[:-1] * q) - bel_term(c, s), abs=1e-15)


def test_aggregation():
    assert aggregate_scr(3.0, 4.0) == 5.0
    assert aggregate_scr(0.0, 0.0) == 0.0


def test_bel_monotone_in_q():
    rng = np.random.default_rng(1)
    ann = AnnuityContract(80, 2021, max_age=100)
    term = TermLifeContract(50, 2021)
    for _ in range(20):
        q = rng.uniform(0.001, 0.3, (50, 30))
        s = MortalitySurface(np.arange(50, 100), np.arange(2021, 2051), q)
        i, j = rng.integers(0, 50), rng.integers(0, 30)
        bumped = q.copy()
        bumped[i, j] = min(q[i, j] + 0.05, 1.0)
        sb = s.with_q(bumped, "shocked")
        assert bel_annuity(ann, sb) <= bel_annuity(ann, s) + 1e-9
        assert bel_term(term, sb) >= bel_term(term, s) - 1e-9


def test_doubling_payouts_doubles_everything():
    rng = np.random.default_rng(2)
    q = rng.uniform(0.001, 0.1, (60, 60))
    s = MortalitySurface(np.arange(60, 120), np.arange(2021, 2081), q)
    scen = MortalitySurface(s.ages, s.years, np.clip(q[None] * rng.uniform(0.8, 1.2, (1000, 1, 1)), 0, 1))
    a1, a2 = AnnuityContract(65, 2021, payout=10_000), AnnuityContract(65, 2021, payout=20_000)
    assert bel_annuity(a2, s) == 2 * bel_annuity(a1, s)
    assert scr_standard_annuity(a2, s) == 2 * scr_standard_annuity(a1, s)
    assert scr_runoff(a2, scen, s) == pytest.approx(2 * scr_runoff(a1, scen, s), rel=1e-15)
    t1, t2 = TermLifeContract(40, 2021, benefit=1.0), TermLifeContract(40, 2021, benefit=2.0)
    st = MortalitySurface(np.arange(40, 120), s.years, np.vstack([np.full((20, 60), 0.002), q]))
    assert scr_standard_term(t2, st)["total"] == 2 * scr_standard_term(t1, st)["total"]


def test_uncovered_diagonal_rejected():
    c = AnnuityContract(60, 2021)
    with pytest.raises(ValidationError, match="does not cover"):
        bel_annuity(c, flat_surface(0.01, range(60, 86), range(2021, 2080)))


# ---------------------------------------------------------------------------
# run-off VaR


def test_order_statistic_definition():
    assert upper_order_statistic(np.arange(1, 1001)[::-1]) == 995.0
    assert upper_order_statistic(np.arange(1, 2001)) == 1990.0
    with pytest.raises(ValidationError, match="at least 1000"):
        upper_order_statistic(np.arange(999))


def test_runoff_degenerate_is_zero():
    s = flat_surface(0.05, range(65, 120), range(2021, 2076))
    scen = MortalitySurface(s.ages, s.years, np.broadcast_to(s.q, (1000,) + s.q.shape))
    for c in (AnnuityContract(65, 2021, max_age=120), TermLifeContract(65 - 10, 2021)):
        if isinstance(c, TermLifeContract):
            s2 = flat_surface(0.05, range(55, 120), range(2021, 2086))
            scen2 = MortalitySurface(s2.ages, s2.years, np.broadcast_to(s2.q, (1000,) + s2.q.shape))
            assert scr_runoff(c, scen2, s2) == 0.0
        else:
            assert scr_runoff(c, scen, s) == 0.0


def test_runoff_ranks_liabilities():
    # scenario k has liability k through a single-year annuity-certain
    c = AnnuityContract(119, 2021, payout=1.0, max_age=120, interest=0.0)
    q = 1.0 - np.arange(1, 1001) / 1000.0
    scen = MortalitySurface(np.array([119]), np.array([2021]), q[:, None, None])
    be = MortalitySurface(np.array([119]), np.array([2021]), np.array([[0.5]]))
    assert scr_runoff(c, scen, be) == pytest.approx(0.995 - 0.5, abs=1e-15)


def test_report_csv_columns():
    be = closed_surface(np.exp(-4 + 0.09 * np.arange(26))[:, None] * np.ones((1, 60)), np.arange(60, 86),
                        np.arange(2021, 2081))
    rows = scr_rows([AnnuityContract(65, 2021), TermLifeContract(60, 2021)], None, be)
    text = report_csv(rows).splitlines()
    assert text[0].split(",")[:5] == ["contract", "issue_age", "bel0", "scr_standard", "scr_runoff"]
    assert text[1].startswith("annuity,65,") and text[2].startswith("term,60,")
    assert rows[0]["scr_standard"] > 0 and rows[1]["scr_standard"] > 0
