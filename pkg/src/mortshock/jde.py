"""Self-adaptive differential evolution (jDE, rand/1/bin) for batched objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError

BatchObjective = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class JDEResult:
    x: np.ndarray
    fun: float
    generations: int
    evaluations: int
    converged: bool


def jde_minimize(
    objective: BatchObjective,
    lower,
    upper,
    pop_size: int | None = None,
    max_generations: int = 3000,
    seed: int | np.random.Generator = 0,
    initial: np.ndarray | None = None,
    tol: float = 1e-10,
    tau_f: float = 0.1,
    tau_cr: float = 0.1,
    f_bounds: tuple[float, float] = (0.1, 1.0),
) -> JDEResult:
    """Minimise ``objective`` over a box.

    ``objective`` maps a ``(pop, dim)`` array to ``pop`` values; ``inf``
    marks infeasible points. Each member carries its own mutation factor
    and crossover rate, resampled with probability ``tau_f`` / ``tau_cr``
    before it produces a trial. The search stops when the spread of the
    population's objective values drops below ``tol * max(1, |best|)`` or
    after ``max_generations``.

    Parameters
    ----------
    initial : rows placed at the start of the population (clipped to the box).
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or np.any(upper <= lower):
        raise ValidationError("invalid search box")
    dim = lower.size
    n = pop_size or 10 * dim
    if n < 4:
        raise ValidationError("differential evolution needs at least 4 members")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    width = upper - lower
    pop = lower + rng.random((n, dim)) * width
    if initial is not None:
        init = np.clip(np.atleast_2d(np.asarray(initial, dtype=float)), lower, upper)
        k = min(len(init), n)
        pop[:k] = init[:k]
    fit = np.asarray(objective(pop), dtype=float)
    evals = n
    F = np.full(n, 0.5)
    CR = np.full(n, 0.9)
    idx = np.arange(n)
    converged = False
    gen = 0
    for gen in range(1, max_generations + 1):
        newF = np.where(rng.random(n) < tau_f, f_bounds[0] + rng.random(n) * (f_bounds[1] - f_bounds[0]), F)
        newCR = np.where(rng.random(n) < tau_cr, rng.random(n), CR)
        # three distinct partners, all different from the target
        r = np.empty((n, 3), dtype=int)
        for j in range(3):
            cand = rng.integers(0, n, n)
            clash = (cand == idx) | np.any(r[:, :j] == cand[:, None], axis=1)
            while clash.any():
                cand[clash] = rng.integers(0, n, clash.sum())
                clash = (cand == idx) | np.any(r[:, :j] == cand[:, None], axis=1)
            r[:, j] = cand
        mutant = pop[r[:, 0]] + newF[:, None] * (pop[r[:, 1]] - pop[r[:, 2]])
        # out-of-box components move halfway between the base vector and the bound
        base = pop[r[:, 0]]
        low_hit = mutant < lower
        high_hit = mutant > upper
        mutant = np.where(low_hit, 0.5 * (base + lower), mutant)
        mutant = np.where(high_hit, 0.5 * (base + upper), mutant)
        cross = rng.random((n, dim)) < newCR[:, None]
        cross[idx, rng.integers(0, dim, n)] = True
        trial = np.where(cross, mutant, pop)
        trial_fit = np.asarray(objective(trial), dtype=float)
        evals += n
        better = trial_fit <= fit
        pop[better] = trial[better]
        fit[better] = trial_fit[better]
        F[better] = newF[better]
        CR[better] = newCR[better]
        best = fit.min()
        if np.isfinite(best) and np.all(np.isfinite(fit)):
            if fit.max() - best <= tol * max(1.0, abs(best)):
                converged = True
                break
    b = int(np.argmin(fit))
    return JDEResult(pop[b].copy(), float(fit[b]), gen, evals, converged)
