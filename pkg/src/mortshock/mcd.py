"""FAST-MCD robust location and scatter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class MCDResult:
    location: np.ndarray
    covariance: np.ndarray
    raw_location: np.ndarray
    raw_covariance: np.ndarray
    support: np.ndarray  # boolean mask of the optimal h-subset
    h: int

    def distances(self, X: np.ndarray) -> np.ndarray:
        return mahalanobis(X, self.location, self.covariance)


def mahalanobis(X, location, covariance) -> np.ndarray:
    """Row-wise ``sqrt((x - loc)' cov^-1 (x - loc))`` via a Cholesky solve."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance matrix is not positive definite") from None
    diff = (X - location).T
    z = np.linalg.solve(chol, diff)
    return np.sqrt(np.sum(z * z, axis=0))


def _consistency(alpha: float, p: int) -> float:
    """Scale factor making a trimmed covariance consistent at the normal model."""
    if alpha >= 1.0:
        return 1.0
    return alpha / chi2.cdf(chi2.ppf(alpha, p), p + 2)


def _mean_cov(X: np.ndarray, idx: np.ndarray):
    sub = X[idx]
    mu = sub.mean(axis=0)
    diff = sub - mu
    return mu, diff.T @ diff / len(idx)


def _logdet(cov: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(cov)
    return val if sign > 0 else -np.inf


def _sq_dist(X, mu, cov):
    diff = X - mu
    return np.einsum("ij,ij->i", diff @ np.linalg.inv(cov), diff)


def _c_steps(X, idx, h, n_steps):
    """Concentration steps; returns the final subset and its log-determinant."""
    mu, cov = _mean_cov(X, idx)
    ld = _logdet(cov)
    for _ in range(n_steps):
        if not np.isfinite(ld):
            break
        new = np.sort(np.argsort(_sq_dist(X, mu, cov), kind="stable")[:h])
        if np.array_equal(new, idx):
            break
        idx = new
        mu, cov = _mean_cov(X, idx)
        ld_new = _logdet(cov)
        # the determinant never increases; stop once it stalls
        stalled = ld_new >= ld - 1e-12
        ld = ld_new
        if stalled:
            break
    return idx, ld


def _initial_subset(X, rng, h):
    n, p = X.shape
    perm = rng.permutation(n)
    k = p + 1
    while k < n:
        _, cov = _mean_cov(X, perm[:k])
        if _logdet(cov) > -np.inf and np.linalg.matrix_rank(cov) == p:
            break
        k += 1
    mu, cov = _mean_cov(X, perm[:k])
    if _logdet(cov) == -np.inf:
        return np.sort(perm[:h])
    return np.sort(np.argsort(_sq_dist(X, mu, cov), kind="stable")[:h])


def fast_mcd(
    X,
    h: int | None = None,
    n_starts: int = 500,
    n_initial_csteps: int = 2,
    n_best: int = 10,
    seed: int = 0,
    reweight: bool = True,
    reweight_quantile: float = 0.975,
) -> MCDResult:
    """Minimum covariance determinant estimate.

    Parameters
    ----------
    X : (n, p) array
    h : subset size, default ``ceil((n + p + 1) / 2)``.
    n_starts : random elemental starts, each refined by ``n_initial_csteps``
        concentration steps; the ``n_best`` best are iterated to convergence.
    reweight : apply the usual one-step reweighting at ``reweight_quantile``.

    Both the raw and the reweighted scatter carry a consistency factor for
    the normal model.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if h is None:
        h = math.ceil((n + p + 1) / 2)
    if not p + 1 <= h <= n:
        raise ValidationError(f"subset size {h} outside [{p + 1}, {n}]")
    if not np.isfinite(X).all():
        raise ValidationError("non-finite observations")
    rng = np.random.default_rng(seed)
    if h == n:
        best = np.arange(n)
    else:
        trials = []
        for _ in range(n_starts):
            idx = _initial_subset(X, rng, h)
            idx, ld = _c_steps(X, idx, h, n_initial_csteps)
            trials.append((ld, tuple(idx)))
        trials.sort(key=lambda t: t[0])
        best, best_ld = None, np.inf
        seen = set()
        for ld, idx in trials:
            if idx in seen:
                continue
            seen.add(idx)
            cand, ld = _c_steps(X, np.array(idx), h, 1000)
            if ld < best_ld:
                best, best_ld = cand, ld
            if len(seen) >= n_best:
                break
        if best is None or not np.isfinite(best_ld):
            raise NumericalError("MCD scatter is singular: more than h points lie on a hyperplane")
    raw_mu, raw_cov = _mean_cov(X, best)
    if not np.isfinite(_logdet(raw_cov)):
        raise NumericalError("MCD scatter is singular")
    raw_cov = raw_cov * _consistency(h / n, p)
    support = np.zeros(n, dtype=bool)
    support[best] = True
    mu, cov = raw_mu, raw_cov
    if reweight:
        keep = _sq_dist(X, raw_mu, raw_cov) <= chi2.ppf(reweight_quantile, p)
        if keep.sum() > p:
            mu, cov = _mean_cov(X, np.where(keep)[0])
            cov = cov * _consistency(keep.mean(), p)
            if not np.isfinite(_logdet(cov)):
                raise NumericalError("reweighted MCD scatter is singular")
    return MCDResult(mu, cov, raw_mu, raw_cov, support, h)
