"""Numerically stable scalar kernels for the belief recursion.

These are the single source of truth for the recursion math: the beliefs
module calls them one patient at a time while simulating, and the estimator's
batch likelihood loops over them inside a compiled kernel.  Keeping one
implementation prevents simulator/estimator drift.

All functions are numba ``@njit`` scalars so they compose into compiled loops
but remain callable from plain Python.
"""

from __future__ import annotations

import math

from numba import njit

__all__ = [
    "logistic",
    "log_logistic",
    "logaddexp",
    "log1mexp",
    "expected_quality",
    "decision_pair",
    "log_rejection_pair",
    "log_acceptance_pair",
]


@njit(cache=True)
def logistic(x: float) -> float:
    """Standard logistic CDF, stable for |x| well past 700."""
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def log_logistic(x: float) -> float:
    """log F(x) without overflow in either tail."""
    if x > 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True)
def logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a >= b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def log1mexp(x: float) -> float:
    """log(1 - exp(x)) for x <= 0."""
    if x >= 0.0:
        return -math.inf
    if x > -0.6931471805599453:  # -log 2: switch point per Maechler's note
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


@njit(cache=True)
def expected_quality(
    p: float, alpha: float, signal: int, log_like_high: float, log_like_low: float
) -> float:
    """E[quality | own signal, rejection-history likelihoods].

    Posterior odds of high quality are prior odds times the signal likelihood
    ratio times the history likelihood ratio; everything stays in log space so
    long histories cannot underflow.
    """
    log_odds = math.log(p) - math.log1p(-p) + (log_like_high - log_like_low)
    signal_lr = math.log(alpha) - math.log1p(-alpha)
    if signal > 0:
        log_odds += signal_lr
    else:
        log_odds -= signal_lr
    return 2.0 * logistic(log_odds) - 1.0


@njit(cache=True)
def decision_pair(
    index: float,
    gamma: float,
    base_log_odds: float,
    signal_lr: float,
    alpha: float,
    log_a: float,
    log_b: float,
    state_diff: float,
    sign: float,
) -> tuple[float, float]:
    """Shared core of the rejection/acceptance pairs with hoisted constants.

    The batch likelihood kernel calls this once per provisional-yes row, so
    the parameter-only logs (``base_log_odds`` = logit of the prior,
    ``signal_lr`` = log likelihood-ratio of one signal, ``log_a``/``log_b`` =
    log signal probabilities) are taken precomputed; recomputing them per row
    roughly doubles the kernel's cost.  ``sign`` is +1.0 to score acceptance
    and -1.0 to score rejection; ``state_diff`` is the running difference of
    the history log-likelihoods under high and low quality.

    The signal mixture is formed in linear space (sums of positive terms, no
    cancellation) and only falls back to the log-space ladder when both
    choice probabilities underflow — deep in the tails past index ~ -745.
    """
    log_odds = base_log_odds + state_diff
    e_pos = 2.0 * logistic(log_odds + signal_lr) - 1.0
    e_neg = 2.0 * logistic(log_odds - signal_lr) - 1.0
    v_pos = sign * (index + gamma * e_pos)
    v_neg = sign * (index + gamma * e_neg)
    f_pos = logistic(v_pos)
    f_neg = logistic(v_neg)
    beta = 1.0 - alpha
    high = alpha * f_pos + beta * f_neg
    low = beta * f_pos + alpha * f_neg
    if high > 0.0 and low > 0.0:
        return math.log(high), math.log(low)
    log_f_pos = log_logistic(v_pos)
    log_f_neg = log_logistic(v_neg)
    return (
        logaddexp(log_a + log_f_pos, log_b + log_f_neg),
        logaddexp(log_b + log_f_pos, log_a + log_f_neg),
    )


@njit(cache=True)
def log_rejection_pair(
    index: float,
    gamma: float,
    p: float,
    alpha: float,
    log_like_high: float,
    log_like_low: float,
) -> tuple[float, float]:
    """(log r(+1), log r(-1)) for one provisional-yes patient.

    r(theta) marginalizes the patient's unobserved signal: the probability
    that a patient with this utility index, holding the given belief state,
    rejects the offer when the latent quality is theta.
    """
    return decision_pair(
        index,
        gamma,
        math.log(p) - math.log1p(-p),
        math.log(alpha) - math.log1p(-alpha),
        alpha,
        math.log(alpha),
        math.log1p(-alpha),
        log_like_high - log_like_low,
        -1.0,
    )


@njit(cache=True)
def log_acceptance_pair(
    index: float,
    gamma: float,
    p: float,
    alpha: float,
    log_like_high: float,
    log_like_low: float,
) -> tuple[float, float]:
    """(log a(+1), log a(-1)): acceptance analogue of log_rejection_pair.

    a(theta) = 1 - r(theta), but computed directly from log F(+v) per signal
    branch rather than via one-minus, so tiny acceptance probabilities keep
    full precision.
    """
    return decision_pair(
        index,
        gamma,
        math.log(p) - math.log1p(-p),
        math.log(alpha) - math.log1p(-alpha),
        alpha,
        math.log(alpha),
        math.log1p(-alpha),
        log_like_high - log_like_low,
        +1.0,
    )
