from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mortshock.dynamics import (
    PeriodDynParams,
    decay_scores,
    fit_weighted_gaussian,
    load_dynamics,
    save_dynamics,
    select_decay,
    simulate_periods,
    stack_period_effects,
)
from mortshock.errors import ValidationError


def test_unweighted_fit_is_the_mle(rng):
    X = rng.normal(size=(40, 3))
    p = fit_weighted_gaussian(X, 1.0, n_common=3)
    np.testing.assert_allclose(p.drift, X.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(p.cov, np.cov(X.T, bias=True), atol=1e-14)


def test_weighted_fit_matches_direct_formula(rng):
    X = rng.normal(size=(30, 4))
    gamma = 0.9
    p = fit_weighted_gaussian(X, gamma, n_common=2)
    w = gamma ** (29 - np.arange(30))
    c = np.r_[(w @ X[:, :2]) / w.sum(), 0.0, 0.0]
    cov = sum(wi * np.outer(x - c, x - c) for wi, x in zip(w, X)) / w.sum()
    np.testing.assert_allclose(p.drift, c, atol=1e-14)
    np.testing.assert_allclose(p.cov, cov, atol=1e-14)
    assert p.drift[2] == 0.0 and p.drift[3] == 0.0


def test_constant_series_is_degenerate():
    v = np.array([0.01, -0.06])
    p = fit_weighted_gaussian(np.tile(v, (10, 1)), 0.95, n_common=2)
    np.testing.assert_allclose(p.drift, v, atol=1e-16)
    np.testing.assert_allclose(p.cov, 0.0, atol=1e-16)
    assert p.rank == 0


def test_gamma_and_length_validation(rng):
    with pytest.raises(ValidationError):
        fit_weighted_gaussian(rng.normal(size=(20, 2)), 0.0, 1)
    with pytest.raises(ValidationError):
        fit_weighted_gaussian(rng.normal(size=(20, 2)), 1.1, 1)
    with pytest.raises(ValidationError):
        fit_weighted_gaussian(rng.normal(size=(3, 2)), 1.0, 1)


def test_stacking_layout():
    K = np.array([[1.0, 2.0], [3.0, 4.0]])
    kappa = np.array([[5.0, 6.0]])
    np.testing.assert_array_equal(stack_period_effects(K, kappa), [[1, 3, 5], [2, 4, 6]])


def test_scores_match_refit_oracle(rng):
    X = rng.normal([0.01, -0.05, 0.0], 0.05, size=(60, 3))
    years = np.arange(1900, 1960)
    grid = [0.9, 1.0]
    got = decay_scores(X, years, grid, 1950, n_common=2)
    for g, gamma in enumerate(grid):
        vals = []
        for t in range(50, 59):
            p = fit_weighted_gaussian(X[: t + 1], gamma, 2)
            vals.append(multivariate_normal(p.drift, p.cov).logpdf(X[t + 1]))
        assert got[g] == pytest.approx(np.mean(vals), abs=1e-9)


def test_singleton_grid_and_year_offset(rng):
    X = rng.normal(size=(70, 2))
    assert select_decay(X, np.arange(1900, 1970), [1.0])[0] == 1.0
    a = select_decay(X, np.arange(1900, 1970), [0.9, 0.95, 1.0], 1955)
    b = select_decay(X, np.arange(2900, 2970), [0.9, 0.95, 1.0], 2955)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_needs_fifty_years_of_history(rng):
    with pytest.raises(ValidationError):
        select_decay(rng.normal(size=(70, 2)), np.arange(1900, 1970), [1.0], 1940)


def test_stationary_data_prefers_no_decay():
    wins = 0
    for seed in range(10):
        X = np.random.default_rng(seed).normal([0.01, -0.06, 0.0, 0.0], [0.07, 0.12, 0.07, 0.12], size=(200, 4))
        gamma, _ = select_decay(X, np.arange(1822, 2022), [0.90, 0.95, 1.0], 1872, n_common=2)
        wins += gamma == 1.0
    assert wins >= 8


def test_ties_go_to_larger_gamma():
    # a constant series has a singular covariance, so every candidate scores -inf
    X = np.ones((60, 2))
    gamma, scores = select_decay(X, np.arange(60), [0.95, 0.97, 0.96], 50)
    assert np.all(scores == -np.inf)
    assert gamma == 0.97


def test_simulation_degenerate_and_moments():
    zero = PeriodDynParams(np.array([0.01, -0.06, 0, 0]), np.zeros((4, 4)), 0.943, 2)
    paths = simulate_periods(zero, 5, 7, seed=1)
    assert np.all(paths == zero.drift)
    cov = np.array([
        [0.00495, 0.00012, 0.00052, -0.00120],
        [0.00012, 0.01491, 0.00281, -0.00320],
        [0.00052, 0.00281, 0.00539, -0.00321],
        [-0.00120, -0.00320, -0.00321, 0.01564],
    ])
    p = PeriodDynParams(np.array([0.01170, -0.06590, 0.0, 0.0]), cov, 0.943, 2)
    draws = simulate_periods(p, 1, 10_000, seed=2)[:, 0]
    assert np.all(np.abs(draws.mean(axis=0) - p.drift) < 4 * np.sqrt(np.diag(cov) / 10_000))
    assert np.linalg.norm(np.cov(draws.T) - cov) / np.linalg.norm(cov) < 0.10
    again = simulate_periods(p, 1, 10_000, seed=2)
    np.testing.assert_array_equal(draws, again[:, 0])


def test_roundtrip(tmp_path, rng):
    p = fit_weighted_gaussian(rng.normal(size=(30, 4)), 0.95, 2)
    save_dynamics(p, tmp_path / "d.json")
    back = load_dynamics(tmp_path / "d.json")
    np.testing.assert_array_equal(back.drift, p.drift)
    np.testing.assert_array_equal(back.cov, p.cov)
    assert back.gamma == p.gamma
