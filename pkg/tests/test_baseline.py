from __future__ import annotations

import numpy as np
import pytest

from mortshock.baseline import (
    constraint_residuals,
    fit_baseline,
    fit_common_trend,
    fit_country_deviation,
    impute_missing_periods,
    load_baseline,
    normalize_factors,
    normalize_two_factor,
    orthogonality_quadratic,
    poisson_loglik,
    save_baseline,
    to_improvement_form,
)
from mortshock.data import CountrySeries, build_panel
from mortshock.errors import NumericalError, ValidationError


def svd_canonical(B, K):
    """Independent route: rank-2 SVD of the centered surface, same sign/order rules."""
    mean = K.mean(axis=1)
    U, S, Vt = np.linalg.svd(B.T @ (K - mean[:, None]), full_matrices=False)
    Bt, Kt = U[:, :2].T.copy(), S[:2, None] * Vt[:2]
    for i in range(2):
        if Bt[i].sum() < 0:
            Bt[i], Kt[i] = -Bt[i], -Kt[i]
    if np.ptp(Bt[1]) > np.ptp(Bt[0]):
        Bt, Kt = Bt[::-1], Kt[::-1]
    return Bt, Kt, B.T @ mean


def surface(A, B, K):
    return A[:, None] + B.T @ K


# ---- likelihood


def test_loglik_examples():
    assert poisson_loglik([[0.0]], [[1.0]], [[1.0]]) == -1.0
    assert poisson_loglik([[np.log(2)]], [[2.0]], [[1.0]]) == pytest.approx(2 * np.log(2) - 2, abs=1e-12)
    assert poisson_loglik([[np.log(2)]], [[2.0]], [[1.0]]) == pytest.approx(-0.61371, abs=1e-5)


def test_loglik_excluded_year_is_ignored(rng):
    eta = rng.normal(-3, 0.1, (4, 5))
    d, e = rng.uniform(1, 9, (4, 5)), rng.uniform(50, 100, (4, 5))
    years = np.arange(2000, 2005)
    base = poisson_loglik(eta, d, e, [2000, 2001, 2003, 2004], years)
    d[:, 2] = 1e6
    eta[:, 2] = 5.0
    assert poisson_loglik(eta, d, e, [2000, 2001, 2003, 2004], years) == base


def test_loglik_overflow_reports_cell():
    with pytest.raises(NumericalError, match=r"\(0, 1\)"):
        poisson_loglik([[0.0, 800.0]], [[1.0, 1.0]], [[1.0, 1.0]])


# ---- normalisation


def _constraints(b1, b2, k1, k2):
    return [
        abs(b1 @ b1 - 1), abs(b2 @ b2 - 1), abs(b1 @ b2), abs(k1 @ k2), abs(k1.sum()), abs(k2.sum())
    ]


def test_random_draws_satisfy_constraints_and_match_svd(rng):
    for _ in range(1000):
        B1, B2 = rng.normal(size=10), rng.normal(size=10)
        K1, K2 = rng.normal(size=20), rng.normal(size=20)
        *_, disc = orthogonality_quadratic(B1, B2, K1, K2)
        a, b, _c, _ = orthogonality_quadratic(B1, B2, K1, K2)
        assert disc >= -1e-12 * b * b
        b1, b2, k1, k2, shift = normalize_two_factor(B1, B2, K1, K2)
        assert max(_constraints(b1, b2, k1, k2)) < 1e-10
        A = rng.normal(size=10)
        before = surface(A, np.vstack([B1, B2]), np.vstack([K1, K2]))
        after = surface(A + shift, np.vstack([b1, b2]), np.vstack([k1, k2]))
        assert np.abs(before - after).max() < 1e-12
        Bo, Ko, shift_o = svd_canonical(np.vstack([B1, B2]), np.vstack([K1, K2]))
        np.testing.assert_allclose(np.vstack([b1, b2]), Bo, atol=1e-8)
        np.testing.assert_allclose(np.vstack([k1, k2]), Ko, atol=1e-8)
        np.testing.assert_allclose(shift, shift_o, atol=1e-12)


def test_loglik_invariant_under_normalisation(rng):
    worst = 0.0
    for _ in range(1000):
        B = rng.normal(size=(2, 10))
        K = rng.normal(0, 0.05, size=(2, 20))
        A = rng.normal(-0.02, 0.01, 10)
        anchor = rng.normal(-4, 0.5, 10)
        steps = np.arange(21)
        L = np.hstack([np.zeros((2, 1)), np.cumsum(K, axis=1)])
        E = rng.uniform(1e3, 1e4, (10, 21))
        eta = anchor[:, None] + np.outer(A, steps) + B.T @ L
        d = rng.poisson(E * np.exp(eta)).astype(float)
        Bt, Kt, shift = normalize_factors(B, K)
        Lt = np.hstack([np.zeros((2, 1)), np.cumsum(Kt, axis=1)])
        eta_t = anchor[:, None] + np.outer(A + shift, steps) + Bt.T @ Lt
        worst = max(worst, abs(poisson_loglik(eta, d, E) - poisson_loglik(eta_t, d, E)))
    assert worst < 1e-10


def test_canonical_input_is_a_fixed_point(rng):
    b1, b2, k1, k2, _ = normalize_two_factor(*rng.normal(size=(2, 8)), *rng.normal(size=(2, 15)))
    out = normalize_two_factor(b1, b2, k1, k2)
    for x, y in zip(out[:4], (b1, b2, k1, k2)):
        np.testing.assert_allclose(x, y, atol=1e-12)
    np.testing.assert_allclose(out[4], 0.0, atol=1e-14)


def test_invariant_transformation_gives_same_canonical_form(rng):
    B1, B2 = rng.normal(size=(2, 10))
    K1, K2 = rng.normal(size=(2, 20))
    ref = normalize_two_factor(B1, B2, K1, K2)
    alt = normalize_two_factor(B1 + B2, B2, K1, K2 - K1)
    for x, y in zip(ref, alt):
        np.testing.assert_allclose(x, y, atol=1e-10)
    s_ref = surface(ref[4], np.vstack(ref[:2]), np.vstack(ref[2:4]))
    s_raw = np.vstack([B1, B2]).T @ np.vstack([K1, K2])
    assert np.abs(s_ref - s_raw).max() < 1e-12


def test_already_orthogonal_inputs_only_rescale():
    B1 = np.array([1.0, 1.0, 1.0, 1.0]) * 2
    B2 = np.array([-1.0, -1.0, 1.0, 1.0])
    K1 = np.array([1.0, -1.0, 1.0, -1.0])
    K2 = np.array([1.0, 1.0, -1.0, -1.0]) * 0.5
    b1, b2, k1, k2, shift = normalize_two_factor(B1, B2, K1, K2)
    # the flat loading has zero range, so it is labelled second
    np.testing.assert_allclose(b1, B2 / 2)
    np.testing.assert_allclose(k1, 2 * K2)
    np.testing.assert_allclose(b2, 0.5)
    np.testing.assert_allclose(k2, 4 * K1)
    assert max(_constraints(b1, b2, k1, k2)) < 1e-14
    np.testing.assert_allclose(shift, 0.0)


def test_zero_period_effect_gets_complementary_loading(rng):
    B1, B2 = rng.normal(size=(2, 6))
    K1, K2 = rng.normal(size=12), np.zeros(12)
    b1, b2, k1, k2, _ = normalize_two_factor(B1, B2, K1, K2)
    assert max(_constraints(b1, b2, k1, k2)) < 1e-12
    assert min(np.abs(k1).max(), np.abs(k2).max()) == 0.0
    live_b, live_k = (b1, k1) if np.abs(k1).max() > 0 else (b2, k2)
    np.testing.assert_allclose(np.outer(live_b, live_k), np.outer(B1, K1 - K1.mean()), atol=1e-12)


def test_constraints_without_centering_keep_period_mean(rng):
    B1, B2 = rng.normal(size=(2, 6))
    K1, K2 = rng.normal(1.0, 1.0, size=(2, 12))
    b1, b2, k1, k2, shift = normalize_two_factor(B1, B2, K1, K2, center=False)
    np.testing.assert_array_equal(shift, 0.0)
    assert abs(k1 @ k2) < 1e-10 and abs(b1 @ b2) < 1e-12
    np.testing.assert_allclose(np.outer(b1, k1) + np.outer(b2, k2), np.outer(B1, K1) + np.outer(B2, K2), atol=1e-12)


# ---- imputation


def test_imputation_examples():
    x = np.arange(10.0)
    np.testing.assert_array_equal(impute_missing_periods(x, np.zeros(10, bool)), x)
    sym = np.ones(9)
    gap = np.zeros(9, bool)
    gap[4] = True
    sym[4] = np.nan
    assert impute_missing_periods(sym, gap)[4] == pytest.approx(1.0)
    # linear series with a single gap at index 5: hand evaluation of the weights
    lin = np.arange(12.0)
    miss = np.zeros(12, bool)
    miss[5] = True
    offsets = np.array([-4, -3, -2, -1, 1, 2, 3, 4])
    w = 0.5 ** np.abs(offsets)
    expected = np.sum(w * (5 + offsets)) / w.sum()
    got = impute_missing_periods(lin, miss)
    assert got[5] == pytest.approx(expected, abs=1e-14)
    np.testing.assert_array_equal(np.delete(got, 5), np.delete(lin, 5))


def test_imputation_block_and_edge():
    x = np.array([1.0, 2.0, 0.0, 0.0, 0.0, 6.0, 7.0])
    miss = np.array([0, 0, 1, 1, 1, 0, 0], bool)
    out = impute_missing_periods(x, miss)
    # middle gap: neighbours at offsets -2,-1 (w .25, .5) wait - offsets 2 and 3 on each side
    w = np.array([0.125, 0.25, 0.25, 0.125])
    assert out[3] == pytest.approx(np.sum(w * [1, 2, 6, 7]) / w.sum())
    edge = impute_missing_periods(np.array([0.0, 3.0, 5.0]), np.array([1, 0, 0], bool))
    assert edge[0] == pytest.approx((0.5 * 3 + 0.25 * 5) / 0.75)


def test_imputation_widens_window_when_needed():
    x = np.r_[1.0, np.zeros(10), 3.0]
    miss = np.r_[False, np.ones(10, bool), False]
    out = impute_missing_periods(x, miss, k=2)
    assert np.isfinite(out).all()
    assert out[5] == pytest.approx((0.5**5 * 1 + 0.5**6 * 3) / (0.5**5 + 0.5**6))


def test_imputation_requires_observations():
    with pytest.raises(ValidationError):
        impute_missing_periods(np.zeros(4), np.ones(4, bool))


# ---- improvement form


def test_improvement_form_examples(fixture_panel):
    L = np.array([[0.0, 1.0, 3.0, 0.0]])
    np.testing.assert_array_equal(np.diff(L, axis=1), [[1.0, 2.0, -3.0]])
    panel, _ = fixture_panel
    bp = fit_baseline(panel, "C01")
    K, kappa = to_improvement_form(bp)
    np.testing.assert_allclose(np.hstack([np.zeros((2, 1)), np.cumsum(K, axis=1)]), bp.common.L, atol=1e-15)
    np.testing.assert_allclose(np.hstack([np.zeros((2, 1)), np.cumsum(kappa, axis=1)]), bp.deviation.lam, atol=1e-15)


# ---- fitting


def _single_country_panel(eta, ages, years, scale=1e5):
    E = np.full(eta.shape, scale)
    s = CountrySeries("X", ages, years, E * np.exp(eta), E, int(years[0]))
    return build_panel([s], {}, (int(ages[0]), int(ages[-1])), (int(years[0]), int(years[-1])))


def _truth(rng, n_ages=10, n_years=30):
    ages, years = np.arange(60, 60 + n_ages), np.arange(1990, 1990 + n_years)
    A = -0.01 - 0.005 * np.linspace(0, 1, n_ages)
    B = np.vstack([np.linspace(1, 2, n_ages), np.linspace(-1, 1, n_ages) ** 2 - 0.3])
    K = np.vstack([rng.normal(0.02, 0.05, n_years - 1), rng.normal(-0.01, 0.04, n_years - 1)])
    anchor = -4.5 + 0.09 * np.arange(n_ages)
    L = np.hstack([np.zeros((2, 1)), np.cumsum(K, axis=1)])
    eta = anchor[:, None] + np.outer(A, years - years[0]) + B.T @ L
    return ages, years, A, B, K, anchor, eta


def test_noise_free_recovery(rng):
    ages, years, A, B, K, anchor, eta = _truth(rng)
    fit = fit_common_trend(_single_country_panel(eta, ages, years))
    Bt, Kt, shift = normalize_factors(B, K)
    assert np.abs(fit.B - Bt).max() < 1e-3
    assert np.abs(fit.K - Kt).max() < 1e-3
    assert np.abs(fit.A - (A + shift)).max() < 1e-3
    assert np.abs(fit.level_predictor(anchor) - eta).max() < 1e-6
    assert max(constraint_residuals(fit.B, fit.L).values()) < 1e-8


def test_trend_only_data_gives_zero_period_effects():
    ages, years = np.arange(60, 70), np.arange(1990, 2020)
    slopes = np.linspace(-0.02, -0.005, 10)
    eta = (-4 + 0.1 * np.arange(10))[:, None] + np.outer(slopes, years - years[0])
    fit = fit_common_trend(_single_country_panel(eta, ages, years))
    assert np.abs(fit.L).max() < 1e-6
    assert np.abs(fit.A - slopes).max() < 1e-6


def test_scale_consistency(fixture_panel):
    panel, _ = fixture_panel
    f1 = fit_common_trend(panel)
    scaled = [
        CountrySeries(s.country_code, s.ages, s.years, s.deaths * 3.7, s.exposures * 3.7, s.first_year_available)
        for s in panel.countries.values()
    ]
    p2 = build_panel(scaled, panel.entry_years, panel.age_range, panel.year_range)
    f2 = fit_common_trend(p2)
    for a, b in ((f1.A, f2.A), (f1.B, f2.B), (f1.L, f2.L)):
        assert np.abs(a - b).max() < 1e-8


def test_fixture_fit_constraints(fixture_panel):
    panel, _ = fixture_panel
    bp = fit_baseline(panel, "C02")
    assert max(constraint_residuals(bp.common.B, bp.common.L, True).values()) < 1e-8
    assert max(constraint_residuals(bp.deviation.beta, bp.deviation.lam, False).values()) < 1e-8
    assert np.ptp(bp.common.B[0]) >= np.ptp(bp.common.B[1])
    assert np.isfinite(bp.level_predictor()).all()


def test_excluded_years_are_imputed(fixture_panel):
    panel, truth = fixture_panel
    excluded = set(truth.shock_years) | {y + 1 for y in truth.shock_years}
    active = [int(y) for y in panel.years if int(y) not in excluded]
    fit = fit_common_trend(panel, active)
    gaps = np.isin(panel.years, sorted(excluded))
    for i in range(2):
        np.testing.assert_allclose(impute_missing_periods(fit.L[i], gaps), fit.L[i], atol=1e-12)
    assert max(constraint_residuals(fit.B, fit.L).values()) < 1e-8


def test_deviation_vanishes_for_self_aggregate():
    rng = np.random.default_rng(7)
    ages, years, *_, eta = _truth(rng)
    panel = _single_country_panel(eta, ages, years)
    common = fit_common_trend(panel)
    dev = fit_country_deviation(panel, common, "X")
    assert np.abs(dev.lam).max() < 1e-6


def test_injected_deviation_recovered(rng):
    ages, years, A, B, K, anchor, eta = _truth(rng)
    E = np.full(eta.shape, 1e5)
    agg = CountrySeries("AGG", ages, years, E * np.exp(eta), E, 1990)
    beta = np.linspace(1.0, 0.2, ages.size)
    beta /= np.linalg.norm(beta)
    kappa = rng.normal(0.0, 0.02, years.size - 1)
    lam = np.r_[0.0, np.cumsum(kappa)]
    eta_c = eta + np.outer(beta, lam)
    country = CountrySeries("C", ages, years, E * np.exp(eta_c), E, 1990)
    panel = build_panel([agg], {}, (60, 69), (1990, 2019))
    common = fit_common_trend(panel)
    panel.countries["C"] = country
    dev = fit_country_deviation(panel, common, "C", l=1)
    sign = np.sign(dev.beta[0] @ beta)
    assert np.abs(sign * dev.beta[0] - beta).max() < 1e-3
    assert np.abs(sign * dev.lam[0] - lam).max() < 1e-3


def test_zero_death_row_is_degenerate(fixture_panel):
    ages, years = np.arange(3), np.arange(2000, 2010)
    d = np.full((3, 10), 5.0)
    d[1] = 0.0
    s = CountrySeries("X", ages, years, d, np.full((3, 10), 100.0), 2000)
    with pytest.raises(NumericalError, match="age 1"):
        fit_common_trend(build_panel([s], {}, (0, 2), (2000, 2009)))


def test_roundtrip_serialisation(tmp_path, fixture_panel):
    panel, _ = fixture_panel
    bp = fit_baseline(panel, "C01")
    save_baseline(bp, tmp_path / "b")
    back = load_baseline(tmp_path / "b")
    np.testing.assert_array_equal(back.common.B, bp.common.B)
    np.testing.assert_array_equal(back.deviation.lam, bp.deviation.lam)
    np.testing.assert_array_equal(back.anchor_country, bp.anchor_country)
    assert (tmp_path / "b" / "manifest.json").exists()
