"""Derivative-free simplex minimizer.

Classic Nelder-Mead with the textbook coefficients (reflect 1, expand 2,
contract 0.5, shrink 0.5) and a function-spread stopping rule.  Written here
rather than imported so the stopping rule, iteration accounting, and restart
behavior are pinned down by our own tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = ["OptimizeResult", "nelder_mead"]

_REFLECT = 1.0
_EXPAND = 2.0
_CONTRACT = 0.5
_SHRINK = 0.5


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    n_evals: int
    converged: bool


def _initial_simplex(x0: np.ndarray) -> np.ndarray:
    """x0 plus one vertex per coordinate, nudged 5% (or 0.00025 from zero)."""
    dim = len(x0)
    simplex = np.repeat(x0[None, :], dim + 1, axis=0)
    for i in range(dim):
        if simplex[i + 1, i] != 0.0:
            simplex[i + 1, i] *= 1.05
        else:
            simplex[i + 1, i] = 0.00025
    return simplex


def nelder_mead(
    func: Callable[[np.ndarray], float],
    x0: Sequence[float],
    *,
    f_spread_tol: float = 1e-8,
    max_iters: int | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> OptimizeResult:
    """Minimize ``func`` from ``x0``.

    Stops when every vertex's value is within ``f_spread_tol`` of the best
    one (converged), or after ``max_iters`` iterations (default 500 per
    dimension; not converged).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1 or x0.size == 0:
        raise ValueError("x0 must be a nonempty 1-d point")
    dim = x0.size
    if max_iters is None:
        max_iters = 500 * dim
    if max_iters < 0:
        raise ValueError(f"max_iters must be nonnegative, got {max_iters}")

    simplex = _initial_simplex(x0)
    values = np.array([func(v) for v in simplex])
    n_evals = dim + 1
    iterations = 0
    converged = False

    while iterations < max_iters:
        order = np.argsort(values, kind="stable")
        simplex = simplex[order]
        values = values[order]
        if values[-1] - values[0] < f_spread_tol:
            converged = True
            break
        iterations += 1

        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        reflected = centroid + _REFLECT * (centroid - worst)
        f_reflected = func(reflected)
        n_evals += 1

        if f_reflected < values[0]:
            expanded = centroid + _EXPAND * (centroid - worst)
            f_expanded = func(expanded)
            n_evals += 1
            if f_expanded < f_reflected:
                simplex[-1], values[-1] = expanded, f_expanded
            else:
                simplex[-1], values[-1] = reflected, f_reflected
        elif f_reflected < values[-2]:
            simplex[-1], values[-1] = reflected, f_reflected
        else:
            if f_reflected < values[-1]:
                # outside contraction, toward the reflected point
                contracted = centroid + _CONTRACT * (reflected - centroid)
            else:
                # inside contraction, toward the worst point
                contracted = centroid + _CONTRACT * (worst - centroid)
            f_contracted = func(contracted)
            n_evals += 1
            if f_contracted < min(f_reflected, values[-1]):
                simplex[-1], values[-1] = contracted, f_contracted
            else:
                for i in range(1, dim + 1):
                    simplex[i] = simplex[0] + _SHRINK * (simplex[i] - simplex[0])
                    values[i] = func(simplex[i])
                n_evals += dim

        if callback is not None:
            callback(iterations, float(values.min()))

    best = int(np.argmin(values))
    return OptimizeResult(
        x=simplex[best].copy(),
        fun=float(values[best]),
        iterations=iterations,
        n_evals=n_evals,
        converged=converged,
    )
