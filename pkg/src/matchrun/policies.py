"""Priority policies: order a donor's matched patients into a sequence.

The OPTN ordering groups by allocation zone, then blood-match level, then
ranks by medical urgency (LAS) and waiting time.  The greedy counterfactuals
rank directly on the deterministic part of acceptance utility.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .core import DonorProfile, PairCovariates, PatientProfile, utility_index

__all__ = [
    "PriorityPolicy",
    "RankedEntry",
    "RankedMatchRun",
    "rank_optn",
    "rank_greedy",
    "rank_reverse_greedy",
    "rank_candidates",
]

Candidate = tuple[PatientProfile, PairCovariates]


class PriorityPolicy(Enum):
    OPTN = "optn"
    GREEDY = "greedy"
    REVERSE_GREEDY = "reverse-greedy"

    @classmethod
    def from_name(cls, name: str) -> "PriorityPolicy":
        for policy in cls:
            if policy.value == name:
                return policy
        valid = ", ".join(p.value for p in cls)
        raise ValueError(f"unknown policy {name!r}; expected one of: {valid}")


@dataclass(frozen=True)
class RankedEntry:
    patient: PatientProfile
    pair: PairCovariates
    sequence_number: int


@dataclass(frozen=True)
class RankedMatchRun:
    donor: DonorProfile
    entries: tuple[RankedEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


def _build(donor: DonorProfile, ordered: Sequence[Candidate]) -> RankedMatchRun:
    entries = tuple(
        RankedEntry(patient=patient, pair=pair, sequence_number=k + 1)
        for k, (patient, pair) in enumerate(ordered)
    )
    return RankedMatchRun(donor=donor, entries=entries)


def _require_compatible(candidates: Sequence[Candidate]) -> None:
    for patient, pair in candidates:
        if pair.primary_blood_match < 1:
            raise ValueError(
                f"patient {patient.id} is blood-incompatible (match level 0); "
                "match runs may only contain compatible candidates"
            )


def rank_optn(donor: DonorProfile, candidates: Iterable[Candidate]) -> RankedMatchRun:
    """Zone, blood-match level, LAS, waiting time, patient id."""
    candidates = list(candidates)
    _require_compatible(candidates)
    ordered = sorted(
        candidates,
        key=lambda cand: (
            cand[1].zone,
            -cand[1].primary_blood_match,
            -cand[0].las,
            -cand[0].waiting_time,
            cand[0].id,
        ),
    )
    return _build(donor, ordered)


def rank_greedy(
    donor: DonorProfile, candidates: Iterable[Candidate], beta: np.ndarray
) -> RankedMatchRun:
    """Highest deterministic acceptance-utility index first."""
    candidates = list(candidates)
    ordered = sorted(
        candidates,
        key=lambda cand: (-utility_index(donor, cand[0], cand[1], beta), cand[0].id),
    )
    return _build(donor, ordered)


def rank_reverse_greedy(
    donor: DonorProfile, candidates: Iterable[Candidate], beta: np.ndarray
) -> RankedMatchRun:
    """Lowest deterministic acceptance-utility index first."""
    candidates = list(candidates)
    ordered = sorted(
        candidates,
        key=lambda cand: (utility_index(donor, cand[0], cand[1], beta), cand[0].id),
    )
    return _build(donor, ordered)


def rank_candidates(
    policy: PriorityPolicy,
    donor: DonorProfile,
    candidates: Iterable[Candidate],
    beta: np.ndarray,
) -> RankedMatchRun:
    if policy is PriorityPolicy.OPTN:
        return rank_optn(donor, candidates)
    if policy is PriorityPolicy.GREEDY:
        return rank_greedy(donor, candidates, beta)
    return rank_reverse_greedy(donor, candidates, beta)
