"""Posterior quality beliefs under the three information regimes.

A patient deciding on an offer knows their own private signal and, depending
on the regime, something about the patients ranked ahead of them:

* ``SOCIAL_LEARNING`` — only the *fact* that every earlier provisional-yes
  patient turned the offer down.  The rejection history enters through a
  likelihood pair (P[history | quality = +1], P[history | quality = -1])
  advanced one rejecter at a time.
* ``NO_SOCIAL_LEARNING`` — nothing; the patient acts on their own signal.
* ``INFORMATION_SHARING`` — the realized signals of all earlier
  provisional-yes patients, which collapses to a net signal count.

Likelihoods are kept in log space; the linear-space ``like_high``/``like_low``
views exist for inspection and can underflow only there, never inside the
recursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Sequence

from . import _stepmath
from .core import ModelParams

__all__ = [
    "BeliefState",
    "EMPTY_HISTORY",
    "InfoRegime",
    "RegimeMisuseError",
    "BeliefUnderflowError",
    "posterior_from_signal",
    "advance_history",
    "posterior_shared",
    "oracle_history_likelihood",
]


class InfoRegime(Enum):
    SOCIAL_LEARNING = "social-learning"
    NO_SOCIAL_LEARNING = "no-social-learning"
    INFORMATION_SHARING = "info-sharing"

    @classmethod
    def from_name(cls, name: str) -> "InfoRegime":
        for regime in cls:
            if regime.value == name:
                return regime
        valid = ", ".join(r.value for r in cls)
        raise ValueError(f"unknown information regime {name!r}; expected one of: {valid}")


class RegimeMisuseError(RuntimeError):
    """An operation was called under a regime in which it has no meaning."""


class BeliefUnderflowError(ArithmeticError):
    """Both history likelihoods vanished; the posterior is undefined."""


@dataclass(frozen=True)
class BeliefState:
    """Rejection-history likelihoods given quality +1 / -1, in log space."""

    log_like_high: float = 0.0
    log_like_low: float = 0.0
    n_processed: int = 0

    @property
    def like_high(self) -> float:
        return math.exp(self.log_like_high)

    @property
    def like_low(self) -> float:
        return math.exp(self.log_like_low)


EMPTY_HISTORY = BeliefState()


def _check_prior(p: float, alpha: float) -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"prior p must lie in (0, 1), got {p}")
    if not 0.5 < alpha < 1.0:
        raise ValueError(f"signal precision alpha must lie in (0.5, 1), got {alpha}")


def posterior_from_signal(
    p: float, alpha: float, signal: int, state: BeliefState = EMPTY_HISTORY
) -> float:
    """E[quality | own signal, rejection history] in [-1, 1]."""
    _check_prior(p, alpha)
    if signal not in (1, -1):
        raise ValueError(f"signal must be +1 or -1, got {signal}")
    if state.log_like_high == -math.inf and state.log_like_low == -math.inf:
        raise BeliefUnderflowError(
            "both history likelihoods are zero; advance the history in log space"
        )
    return _stepmath.expected_quality(
        p, alpha, int(signal), state.log_like_high, state.log_like_low
    )


def advance_history(
    state: BeliefState,
    rejecter_index: float,
    params: ModelParams,
    regime: InfoRegime = InfoRegime.SOCIAL_LEARNING,
) -> BeliefState:
    """Fold one provisional-yes rejecter into the history likelihoods.

    The rejecter's own acceptance threshold used their posterior at *their*
    turn (the state passed in), with their unobserved signal marginalized
    out, so the update multiplies each likelihood by
    r(theta) = sum_signal P[signal | theta] * F(-(index + gamma * E[theta | signal, state])).
    """
    if regime is InfoRegime.INFORMATION_SHARING:
        raise RegimeMisuseError(
            "rejection histories are not the information channel under "
            "information sharing; use posterior_shared"
        )
    if regime is InfoRegime.NO_SOCIAL_LEARNING:
        return state
    if not math.isfinite(rejecter_index):
        raise ValueError(f"rejecter index must be finite, got {rejecter_index}")
    log_r_high, log_r_low = _stepmath.log_rejection_pair(
        float(rejecter_index),
        params.gamma,
        params.p,
        params.alpha,
        state.log_like_high,
        state.log_like_low,
    )
    return BeliefState(
        log_like_high=state.log_like_high + log_r_high,
        log_like_low=state.log_like_low + log_r_low,
        n_processed=state.n_processed + 1,
    )


def posterior_shared(
    p: float, alpha: float, own_signal: int, earlier_signals: Sequence[int] = ()
) -> float:
    """E[quality] when all earlier provisional-yes signals are public."""
    _check_prior(p, alpha)
    signals = [int(own_signal), *map(int, earlier_signals)]
    if any(s not in (1, -1) for s in signals):
        raise ValueError("signals must be +1 or -1")
    net = sum(signals)  # n_plus - n_minus
    log_odds = math.log(p) - math.log1p(-p)
    log_odds += net * (math.log(alpha) - math.log1p(-alpha))
    q = _stepmath.logistic(log_odds)
    return 2.0 * q - 1.0


def oracle_history_likelihood(
    rejecter_indices: Sequence[float],
    params: ModelParams,
    regime: InfoRegime = InfoRegime.SOCIAL_LEARNING,
) -> tuple[float, float]:
    """Brute-force (like_high, like_low) for a rejection history.

    Test oracle: enumerates every signal vector of the rejecters and sums
    probability-weighted analytic rejection probabilities, with each
    rejecter's posterior computed by direct Bayes arithmetic on the
    enumerated prefix likelihoods.  Deliberately avoids advance_history and
    log space.  Exponential in the prefix length, hence the hard cap.
    """
    n = len(rejecter_indices)
    if n > 12:
        raise ValueError(f"enumeration oracle capped at 12 rejecters, got {n}")
    if regime is InfoRegime.INFORMATION_SHARING:
        raise RegimeMisuseError("no rejection-history likelihood under information sharing")
    if regime is InfoRegime.NO_SOCIAL_LEARNING:
        return (1.0, 1.0)

    p, alpha, gamma = params.p, params.alpha, params.gamma
    prefix_cache: dict[int, tuple[float, float]] = {0: (1.0, 1.0)}

    def signal_prob(signal: int, theta: int) -> float:
        return alpha if signal == theta else 1.0 - alpha

    def prefix_like(length: int) -> tuple[float, float]:
        if length in prefix_cache:
            return prefix_cache[length]
        total_high = 0.0
        total_low = 0.0
        for signals in product((1, -1), repeat=length):
            weight_high = 1.0
            weight_low = 1.0
            for k, signal in enumerate(signals):
                like_high_k, like_low_k = prefix_like(k)
                a = alpha if signal == 1 else 1.0 - alpha
                numer = p * a * like_high_k
                denom = numer + (1.0 - p) * (1.0 - a) * like_low_k
                expected = 2.0 * (numer / denom) - 1.0
                threshold = rejecter_indices[k] + gamma * expected
                reject_prob = 1.0 - 1.0 / (1.0 + math.exp(-threshold))
                weight_high *= signal_prob(signal, 1) * reject_prob
                weight_low *= signal_prob(signal, -1) * reject_prob
            total_high += weight_high
            total_low += weight_low
        prefix_cache[length] = (total_high, total_low)
        return prefix_cache[length]

    return prefix_like(n)
