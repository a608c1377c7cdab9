"""Marginal log-likelihood of observed match runs.

A donor's contribution marginalizes two things nobody in the data reveals:
the latent quality and every provisional-yes patient's private signal.
Conditional on quality, each rejecter contributes the probability that a
patient with their utility index — holding the belief implied by the
rejections before them — turns the offer down, signal integrated out; an
accepted donor's final row contributes the matching acceptance factor.  The
quality mixture is then collapsed against the prior.  All of it runs in log
space through the same scalar kernels the simulator's belief recursion uses.

Two evaluation paths exist on purpose: a readable per-donor function and a
compiled batch kernel over the whole dataset.  They share the scalar math;
the brute-force enumeration at the bottom shares nothing and exists to catch
both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from . import _stepmath
from .beliefs import oracle_history_likelihood
from .core import COVARIATE_NAMES, ModelParams, PairCovariates, covariate_row, utility_index
from .policies import RankedMatchRun

__all__ = [
    "EstimationData",
    "build_estimation_data",
    "donor_log_likelihood",
    "total_log_likelihood",
    "donor_log_likelihood_vector",
    "enumerate_donor_log_likelihood",
]

_DECISIONS = ("A", "R", "NA")


@dataclass(frozen=True)
class EstimationData:
    """Flattened provisional-yes rows, grouped per donor run.

    ``X`` holds the covariate rows of provisional-yes offers only (patients
    outside the provisional set never decide, so they drop out of the
    likelihood); ``indptr[d]:indptr[d+1]`` slices donor d's rows in sequence
    order; ``accepted[d]`` marks runs whose last provisional-yes row took
    the organ.
    """

    X: np.ndarray
    indptr: np.ndarray
    accepted: np.ndarray
    donor_ids: tuple[str, ...]
    n_offers: int
    n_provisional_yes: int

    def __post_init__(self) -> None:
        if self.X.ndim != 2 or self.X.shape[1] != len(COVARIATE_NAMES):
            raise ValueError(f"X must be (rows, {len(COVARIATE_NAMES)}), got {self.X.shape}")
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.X):
            raise ValueError("indptr does not span the rows of X")
        if len(self.accepted) != len(self.indptr) - 1:
            raise ValueError("one accepted flag per donor run required")
        if not np.isfinite(self.X).all():
            raise ValueError("covariates contain non-finite values")

    @property
    def n_runs(self) -> int:
        return len(self.accepted)


def build_estimation_data(bundle) -> EstimationData:
    """Join offers with profiles into the estimator's flat layout."""
    offers = bundle.offers
    if offers is None or len(offers) == 0:
        raise ValueError("dataset has no offer rows to estimate from")
    rows = []
    indptr = [0]
    accepted = []
    donor_ids = []
    n_py = 0
    for donor_id, block in offers.run_slices:
        donor = bundle.donor_by_id[donor_id]
        took = False
        for i in range(block.start, block.stop):
            if not offers.provisional_yes[i]:
                continue
            n_py += 1
            patient = bundle.patient_by_id[str(offers.patient_ids[i])]
            pair = PairCovariates(
                primary_blood_match=int(offers.blood_match[i]),
                distance_nm=float(offers.distance_nm[i]),
                age_diff=float(offers.age_diff[i]),
                height_diff=float(offers.height_diff[i]),
                weight_diff=float(offers.weight_diff[i]),
            )
            rows.append(covariate_row(donor, patient, pair))
            if offers.final_decisions[i] == "A":
                took = True
        indptr.append(len(rows))
        accepted.append(took)
        donor_ids.append(donor_id)
    X = np.array(rows) if rows else np.zeros((0, len(COVARIATE_NAMES)))
    return EstimationData(
        X=X,
        indptr=np.asarray(indptr, dtype=np.int64),
        accepted=np.asarray(accepted, dtype=np.bool_),
        donor_ids=tuple(donor_ids),
        n_offers=len(offers),
        n_provisional_yes=n_py,
    )


def donor_log_likelihood(
    match_run: RankedMatchRun,
    decisions: Sequence[str],
    params: ModelParams,
    *,
    indices: Sequence[float] | None = None,
) -> float:
    """Log-likelihood contribution of one donor's (possibly truncated) run.

    ``decisions`` aligns with the run's sequence order: "A" accept, "R"
    reject, "NA" for patients outside the provisional-yes set.  Anything
    after the first "A" is ignored, so padding an accepted run with its
    never-reached tail cannot change the value.
    """
    if len(decisions) > len(match_run):
        raise ValueError("more decisions than candidates in the match run")
    bad = [d for d in decisions if d not in _DECISIONS]
    if bad:
        raise ValueError(f"unknown decision codes {sorted(set(bad))}; expected A/R/NA")
    if indices is None:
        idx = [
            utility_index(match_run.donor, e.patient, e.pair, params.beta)
            for e in match_run.entries[: len(decisions)]
        ]
    else:
        idx = [float(v) for v in indices[: len(decisions)]]
    if not all(math.isfinite(v) for v in idx):
        raise ValueError("utility indices must be finite")

    alpha, p, gamma = params.alpha, params.p, params.gamma
    state_h = 0.0
    state_l = 0.0
    term_h = 0.0
    term_l = 0.0
    for k, decision in enumerate(decisions):
        if decision == "NA":
            continue
        if decision == "A":
            la_h, la_l = _stepmath.log_acceptance_pair(
                idx[k], gamma, p, alpha, state_h, state_l
            )
            term_h = state_h + la_h
            term_l = state_l + la_l
            break
        lr_h, lr_l = _stepmath.log_rejection_pair(
            idx[k], gamma, p, alpha, state_h, state_l
        )
        state_h += lr_h
        state_l += lr_l
        term_h = state_h
        term_l = state_l
    return _stepmath.logaddexp(
        math.log(p) + term_h, math.log1p(-p) + term_l
    )


@njit(cache=True)
def _batch_logliks(eta, indptr, accepted, alpha, p, gamma, out):
    log_p = math.log(p)
    log_q = math.log1p(-p)
    base_log_odds = math.log(p) - math.log1p(-p)
    signal_lr = math.log(alpha) - math.log1p(-alpha)
    log_a = math.log(alpha)
    log_b = math.log1p(-alpha)
    for d in range(indptr.size - 1):
        lo = indptr[d]
        hi = indptr[d + 1]
        state_h = 0.0
        state_l = 0.0
        stop = hi - 1 if accepted[d] else hi
        for j in range(lo, stop):
            lr_h, lr_l = _stepmath.decision_pair(
                eta[j], gamma, base_log_odds, signal_lr, alpha, log_a, log_b,
                state_h - state_l, -1.0,
            )
            state_h += lr_h
            state_l += lr_l
        if accepted[d]:
            la_h, la_l = _stepmath.decision_pair(
                eta[hi - 1], gamma, base_log_odds, signal_lr, alpha, log_a, log_b,
                state_h - state_l, +1.0,
            )
            state_h += la_h
            state_l += la_l
        out[d] = _stepmath.logaddexp(log_p + state_h, log_q + state_l)
    return out


def donor_log_likelihood_vector(
    data: EstimationData, params: ModelParams
) -> np.ndarray:
    """Per-donor log-likelihood terms via the compiled batch kernel."""
    eta = data.X @ params.beta
    out = np.empty(data.n_runs)
    _batch_logliks(
        eta, data.indptr, data.accepted, params.alpha, params.p, params.gamma, out
    )
    return out


def total_log_likelihood(data: EstimationData, params: ModelParams) -> float:
    return float(donor_log_likelihood_vector(data, params).sum())


def enumerate_donor_log_likelihood(
    match_run: RankedMatchRun,
    decisions: Sequence[str],
    params: ModelParams,
) -> float:
    """Brute-force oracle for donor_log_likelihood (runs of ~12 or fewer).

    Enumerates the rejecters' signal vectors in plain linear-space
    arithmetic (via the beliefs module's enumeration oracle) and adds the
    accepter factor, if any, from direct Bayes posteriors.  No log-space
    recursion, no shared kernels.
    """
    if len(decisions) > len(match_run):
        raise ValueError("more decisions than candidates in the match run")
    idx = [
        utility_index(match_run.donor, e.patient, e.pair, params.beta)
        for e in match_run.entries[: len(decisions)]
    ]
    rejecter_idx = []
    accepter_idx = None
    for k, decision in enumerate(decisions):
        if decision == "NA":
            continue
        if decision == "A":
            accepter_idx = idx[k]
            break
        if decision == "R":
            rejecter_idx.append(idx[k])
        else:
            raise ValueError(f"unknown decision code {decision!r}")

    p, alpha, gamma = params.p, params.alpha, params.gamma
    like_high, like_low = oracle_history_likelihood(rejecter_idx, params)
    if accepter_idx is None:
        return math.log(p * like_high + (1.0 - p) * like_low)

    def accept_prob(theta: int) -> float:
        total = 0.0
        for signal in (1, -1):
            prob_signal = alpha if signal == theta else 1.0 - alpha
            numer = p * (alpha if signal == 1 else 1.0 - alpha) * like_high
            denom = numer + (1.0 - p) * (1.0 - alpha if signal == 1 else alpha) * like_low
            expected = 2.0 * (numer / denom) - 1.0
            threshold = accepter_idx + gamma * expected
            total += prob_signal * (1.0 / (1.0 + math.exp(-threshold)))
        return total

    value = p * like_high * accept_prob(1) + (1.0 - p) * like_low * accept_prob(-1)
    return math.log(value)
