"""Match-run simulation engine and counterfactual experiment metrics.

One experiment cell = (priority policy, information regime, seed).  Every
run keeps the same random draws across cells — donor quality, provisional
responses, signals, and acceptance shocks are all drawn *before* ranking and
attached to patients, so that switching the policy or the regime is the only
thing that changes between cells.  Aggregation walks tasks in a fixed order,
which makes reports byte-identical no matter how many worker threads ran
the match runs.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .beliefs import (
    EMPTY_HISTORY,
    InfoRegime,
    advance_history,
    posterior_from_signal,
    posterior_shared,
)
from .core import (
    BLOOD_TYPES,
    DonorProfile,
    ModelParams,
    PairCovariates,
    PatientProfile,
    Quality,
    Signal,
    accept_probability,
    blood_match_level,
    exante_accept_utility,
    truncated_normal,
    utility_index,
)
from .policies import PriorityPolicy, RankedMatchRun, rank_candidates

logger = logging.getLogger(__name__)

__all__ = [
    "RunSizeLaw",
    "RngStream",
    "MatchDraws",
    "PositionRecord",
    "MatchRunOutcome",
    "ExperimentReport",
    "draw_match_randomness",
    "build_compat_pools",
    "run_match",
    "simulate_one",
    "run_experiment",
    "conditional_accept_curve",
    "curve_experiment",
    "cumulative_accept_prob",
    "write_report_csv",
    "write_curve_csv",
]


@dataclass(frozen=True)
class RunSizeLaw:
    """Distribution of candidates per donor: rounded truncated normal."""

    mean: float = 59.8
    sd: float = 48.4
    lower: float = 1.0
    upper: float = 222.0

    def draw(self, rng: np.random.Generator) -> int:
        value = truncated_normal(rng, self.mean, self.sd, self.lower, self.upper)
        return max(1, int(round(value)))


@dataclass(frozen=True)
class RngStream:
    """Root of all simulation randomness.

    Each (donor position, replication) pair gets its own child generator, so
    a run's draws depend only on (seed, donor, replication) — never on
    execution order, thread count, or how many other runs happened first.
    """

    seed: int

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")

    def for_run(self, donor_pos: int, replication: int) -> np.random.Generator:
        key = np.random.SeedSequence([self.seed, donor_pos, replication])
        return np.random.default_rng(key)


@dataclass(frozen=True)
class MatchDraws:
    """Pre-drawn randomness for one run, aligned with a candidate ordering."""

    quality: Quality
    provisional: np.ndarray  # bool per candidate
    signals: np.ndarray  # +1 / -1 per candidate
    shock_uniforms: np.ndarray  # uniform(0,1) per candidate

    def __post_init__(self) -> None:
        n = len(self.provisional)
        if len(self.signals) != n or len(self.shock_uniforms) != n:
            raise ValueError("draw vectors must share one length")

    def __len__(self) -> int:
        return len(self.provisional)

    def permuted(self, order: np.ndarray) -> "MatchDraws":
        return MatchDraws(
            quality=self.quality,
            provisional=self.provisional[order],
            signals=self.signals[order],
            shock_uniforms=self.shock_uniforms[order],
        )


def draw_match_randomness(
    rng: np.random.Generator, n: int, params: ModelParams
) -> MatchDraws:
    """Draw one run's randomness in the fixed protocol order.

    Order matters for reproducibility: donor quality first, then the
    candidates' provisional responses, signal coins, and acceptance shocks,
    each as one vectorized call.
    """
    quality = Quality.HIGH if rng.random() < params.p else Quality.LOW
    provisional = rng.random(n) < params.mu
    correct = rng.random(n) < params.alpha
    signals = np.where(correct, int(quality), -int(quality)).astype(np.int64)
    shock_uniforms = rng.random(n)
    return MatchDraws(quality, provisional, signals, shock_uniforms)


@dataclass(frozen=True)
class PositionRecord:
    """What happened at one sequence position of a match run."""

    sequence_number: int
    provisional_yes: bool
    signal: Signal
    final_decision: str  # "A" accept, "R" reject, "NA" never asked

    def __post_init__(self) -> None:
        if self.final_decision not in ("A", "R", "NA"):
            raise ValueError(f"bad decision code {self.final_decision!r}")
        if (self.final_decision == "NA") != (not self.provisional_yes):
            raise ValueError(
                "final decision is NA exactly when the provisional response was no"
            )


@dataclass(frozen=True)
class MatchRunOutcome:
    donor_id: str
    quality: Quality
    run_length: int
    accepted: bool
    accepted_sequence: int | None
    accepter_utility: float | None
    records: tuple[PositionRecord, ...]

    def __post_init__(self) -> None:
        has_seq = self.accepted_sequence is not None
        has_util = self.accepter_utility is not None
        if not (self.accepted == has_seq == has_util):
            raise ValueError(
                "accepted, accepted_sequence, and accepter_utility must be "
                "present or absent together"
            )
        if len(self.records) > self.run_length:
            raise ValueError("more position records than the run has positions")
        if self.accepted and not 1 <= self.accepted_sequence <= self.run_length:
            raise ValueError("accepted sequence lies outside the run")


def _resolve_indices(
    ranked: RankedMatchRun, beta: np.ndarray, indices
) -> np.ndarray:
    if indices is None:
        return np.array(
            [utility_index(ranked.donor, e.patient, e.pair, beta) for e in ranked.entries]
        )
    indices = np.asarray(indices, dtype=float)
    if indices.shape != (len(ranked),):
        raise ValueError(
            f"indices has shape {indices.shape}, expected ({len(ranked)},)"
        )
    return indices


def run_match(
    ranked: RankedMatchRun,
    params: ModelParams,
    regime: InfoRegime,
    rng: np.random.Generator | None = None,
    *,
    draws: MatchDraws | None = None,
    indices: Sequence[float] | None = None,
) -> MatchRunOutcome:
    """Play out one match run and report who (if anyone) took the organ.

    Draws come either from ``rng`` (standalone use) or pre-aligned via
    ``draws`` (the common-random-numbers path).  A patient accepts when
    their uniform shock falls below the acceptance probability implied by
    their utility index and posterior quality belief; the belief depends on
    the information regime.  Under social learning the run stops at the
    first acceptance; under the counterfactual regimes every provisional-yes
    patient decides and the smallest sequence number among the accepters
    wins.  ``indices`` short-circuits per-entry index computation when the
    caller already has the vector.
    """
    n = len(ranked)
    if draws is None:
        if rng is None:
            raise ValueError("run_match needs either an rng or pre-drawn randomness")
        draws = draw_match_randomness(rng, n, params)
    elif len(draws) != n:
        raise ValueError(f"draws cover {len(draws)} candidates, run has {n}")
    idx = _resolve_indices(ranked, params.beta, indices)

    p, alpha, gamma = params.p, params.alpha, params.gamma
    quality = draws.quality
    records: list[PositionRecord] = []
    accepted_sequence: int | None = None

    if regime is InfoRegime.SOCIAL_LEARNING:
        state = EMPTY_HISTORY
        for k in range(n):
            seq = k + 1
            signal = Signal(int(draws.signals[k]))
            if not draws.provisional[k]:
                records.append(PositionRecord(seq, False, signal, "NA"))
                continue
            expected = posterior_from_signal(p, alpha, int(signal), state)
            chance = accept_probability(float(idx[k]), expected, gamma)
            if draws.shock_uniforms[k] < chance:
                records.append(PositionRecord(seq, True, signal, "A"))
                accepted_sequence = seq
                break
            records.append(PositionRecord(seq, True, signal, "R"))
            state = advance_history(state, float(idx[k]), params)
    else:
        shared_signals: list[int] = []
        for k in range(n):
            seq = k + 1
            signal = Signal(int(draws.signals[k]))
            if not draws.provisional[k]:
                records.append(PositionRecord(seq, False, signal, "NA"))
                continue
            if regime is InfoRegime.NO_SOCIAL_LEARNING:
                expected = posterior_from_signal(p, alpha, int(signal))
            else:
                expected = posterior_shared(p, alpha, int(signal), shared_signals)
                shared_signals.append(int(signal))
            chance = accept_probability(float(idx[k]), expected, gamma)
            if draws.shock_uniforms[k] < chance:
                records.append(PositionRecord(seq, True, signal, "A"))
                if accepted_sequence is None:
                    accepted_sequence = seq
            else:
                records.append(PositionRecord(seq, True, signal, "R"))

    utility = None
    if accepted_sequence is not None:
        utility = exante_accept_utility(
            float(idx[accepted_sequence - 1]), int(quality), gamma
        )
    return MatchRunOutcome(
        donor_id=ranked.donor.id,
        quality=quality,
        run_length=n,
        accepted=accepted_sequence is not None,
        accepted_sequence=accepted_sequence,
        accepter_utility=utility,
        records=tuple(records),
    )


def build_compat_pools(
    patients: Sequence[PatientProfile],
) -> dict[str, np.ndarray]:
    """Patient positions compatible with each donor blood type."""
    pools = {}
    for donor_type in BLOOD_TYPES:
        pools[donor_type] = np.array(
            [
                i
                for i, patient in enumerate(patients)
                if blood_match_level(donor_type, patient.blood_type) >= 1
            ],
            dtype=np.int64,
        )
    return pools


def simulate_one(
    donors: Sequence[DonorProfile],
    patients: Sequence[PatientProfile],
    donor_pos: int,
    replication: int,
    stream: RngStream,
    params: ModelParams,
    policy: PriorityPolicy,
    regime: InfoRegime,
    *,
    run_size: RunSizeLaw | None = None,
    pools: Mapping[str, np.ndarray] | None = None,
    warn_shrink: bool = True,
) -> tuple[RankedMatchRun, MatchRunOutcome]:
    """Sample, rank, and run one donor's match run.

    Draw protocol (fixed): run size, candidate choice, then the per-run
    randomness of :func:`draw_match_randomness`, all from the generator for
    (seed, donor position, replication).  Draws are made in candidate-sample
    order and permuted to the ranking afterwards, so every policy and regime
    sees the same patient-level randomness.
    """
    run_size = run_size or RunSizeLaw()
    donor = donors[donor_pos]
    if pools is None:
        pool = np.array(
            [
                i
                for i, patient in enumerate(patients)
                if blood_match_level(donor.blood_type, patient.blood_type) >= 1
            ],
            dtype=np.int64,
        )
    else:
        pool = pools[donor.blood_type]

    rng = stream.for_run(donor_pos, replication)
    want = run_size.draw(rng)
    m = min(want, len(pool))
    if m < want and warn_shrink:
        logger.warning(
            "donor %s: wanted %d candidates but only %d compatible patients",
            donor.id,
            want,
            len(pool),
        )
    chosen = rng.choice(pool, size=m, replace=False) if m else np.array([], dtype=np.int64)
    draws = draw_match_randomness(rng, m, params)

    candidates = [
        (patients[i], PairCovariates.from_profiles(donor, patients[i])) for i in chosen
    ]
    ranked = rank_candidates(policy, donor, candidates, params.beta)

    sample_pos = {patients[i].id: j for j, i in enumerate(chosen)}
    if len(sample_pos) != m:
        raise ValueError("candidate set contains duplicate patient ids")
    order = np.array(
        [sample_pos[e.patient.id] for e in ranked.entries], dtype=np.int64
    )
    outcome = run_match(ranked, params, regime, draws=draws.permuted(order))
    return ranked, outcome


@dataclass(frozen=True)
class ExperimentReport:
    """Aggregate metrics for one (policy, regime) experiment cell."""

    policy: PriorityPolicy
    regime: InfoRegime
    seed: int
    replications: int
    n_runs: int
    n_accepted: int
    allocation_rate: float
    mean_accepted_sequence: float
    mean_acceptance_utility: float
    total_acceptance_utility: float
    accept_rate_high_quality: float
    reject_rate_low_quality: float
    mean_accepted_las: float
    mean_accepted_waiting: float
    mean_accepted_blood_match: float
    mean_accepted_distance: float
    outcomes: tuple[MatchRunOutcome, ...] = field(
        default=(), repr=False, compare=False
    )

    def __post_init__(self) -> None:
        for name in ("allocation_rate", "accept_rate_high_quality", "reject_rate_low_quality"):
            value = getattr(self, name)
            if not math.isnan(value) and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _nan_mean(total: float, count: int) -> float:
    return total / count if count else float("nan")


def run_experiment(
    population,
    params: ModelParams,
    policy: PriorityPolicy,
    regime: InfoRegime,
    replications: int,
    seed: int,
    *,
    run_size: RunSizeLaw | None = None,
    threads: int = 1,
    keep_outcomes: bool = False,
) -> ExperimentReport:
    """Simulate every donor ``replications`` times and aggregate one cell.

    ``population`` is anything exposing ``donors`` and ``patients``
    sequences (a generated dataset bundle works as-is).  Tasks may run on a
    thread pool, but aggregation always walks them in (donor, replication)
    order, so the report is identical for any ``threads``.
    """
    donors = tuple(population.donors)
    patients = tuple(population.patients)
    if not donors or not patients:
        raise ValueError("population must contain at least one donor and one patient")
    if replications < 1:
        raise ValueError(f"replications must be >= 1, got {replications}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    run_size = run_size or RunSizeLaw()
    pools = build_compat_pools(patients)
    stream = RngStream(seed)
    shrink_warned: set[int] = set()
    tasks = [
        (donor_pos, rep)
        for donor_pos in range(len(donors))
        for rep in range(replications)
    ]

    def one(task: tuple[int, int]):
        donor_pos, rep = task
        first = donor_pos not in shrink_warned
        shrink_warned.add(donor_pos)
        ranked, outcome = simulate_one(
            donors,
            patients,
            donor_pos,
            rep,
            stream,
            params,
            policy,
            regime,
            run_size=run_size,
            pools=pools,
            warn_shrink=first,
        )
        accepter = None
        if outcome.accepted:
            entry = ranked.entries[outcome.accepted_sequence - 1]
            accepter = (
                entry.patient.las,
                entry.patient.waiting_time,
                float(entry.pair.primary_blood_match),
                entry.pair.distance_nm,
            )
        return outcome if keep_outcomes else _thin(outcome), accepter

    if threads == 1:
        results = [one(task) for task in tasks]
    else:
        chunk = max(1, len(tasks) // (threads * 8))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, tasks, chunksize=chunk))

    n_runs = len(tasks)
    n_accepted = 0
    n_high = 0
    n_high_accepted = 0
    n_low_rejected = 0
    seq_sum = 0.0
    util_sum = 0.0
    las_sum = wait_sum = blood_sum = dist_sum = 0.0
    outcomes: list[MatchRunOutcome] = []
    for outcome, accepter in results:
        if keep_outcomes:
            outcomes.append(outcome)
        high = outcome.quality is Quality.HIGH
        n_high += high
        if outcome.accepted:
            n_accepted += 1
            n_high_accepted += high
            seq_sum += outcome.accepted_sequence
            util_sum += outcome.accepter_utility
            las, wait, blood, dist = accepter
            las_sum += las
            wait_sum += wait
            blood_sum += blood
            dist_sum += dist
        elif not high:
            n_low_rejected += 1
    n_low = n_runs - n_high

    return ExperimentReport(
        policy=policy,
        regime=regime,
        seed=seed,
        replications=replications,
        n_runs=n_runs,
        n_accepted=n_accepted,
        allocation_rate=n_accepted / n_runs,
        mean_accepted_sequence=_nan_mean(seq_sum, n_accepted),
        mean_acceptance_utility=_nan_mean(util_sum, n_accepted),
        total_acceptance_utility=util_sum,
        accept_rate_high_quality=_nan_mean(float(n_high_accepted), n_high),
        reject_rate_low_quality=_nan_mean(float(n_low_rejected), n_low),
        mean_accepted_las=_nan_mean(las_sum, n_accepted),
        mean_accepted_waiting=_nan_mean(wait_sum, n_accepted),
        mean_accepted_blood_match=_nan_mean(blood_sum, n_accepted),
        mean_accepted_distance=_nan_mean(dist_sum, n_accepted),
        outcomes=tuple(outcomes),
    )


def _thin(outcome: MatchRunOutcome) -> MatchRunOutcome:
    """Drop per-position records to keep large experiments light."""
    return MatchRunOutcome(
        donor_id=outcome.donor_id,
        quality=outcome.quality,
        run_length=outcome.run_length,
        accepted=outcome.accepted,
        accepted_sequence=outcome.accepted_sequence,
        accepter_utility=outcome.accepter_utility,
        records=(),
    )


def conditional_accept_curve(
    outcomes: Iterable[MatchRunOutcome],
) -> tuple[tuple[int, float], ...]:
    """P(accept at position k | run reached k and position k said provisional yes).

    A run "reaches" position k when no smaller position already took the
    organ.  Positions nobody reached with a provisional yes are omitted.
    Consumes the iterable lazily, so it can be fed a generator of outcomes
    without holding them all in memory.
    """
    seen = False
    reached: dict[int, int] = {}
    accepted: dict[int, int] = {}
    for outcome in outcomes:
        seen = True
        stop = outcome.accepted_sequence if outcome.accepted else None
        for record in outcome.records:
            k = record.sequence_number
            if stop is not None and k > stop:
                break
            if not record.provisional_yes:
                continue
            reached[k] = reached.get(k, 0) + 1
            if k == stop:
                accepted[k] = accepted.get(k, 0) + 1
    if not seen:
        raise ValueError("need at least one outcome to build the curve")
    return tuple(
        (k, accepted.get(k, 0) / reached[k]) for k in sorted(reached)
    )


def curve_experiment(
    population,
    params: ModelParams,
    policy: PriorityPolicy,
    regime: InfoRegime,
    replications: int,
    seed: int,
    *,
    run_size: RunSizeLaw | None = None,
) -> tuple[tuple[int, float], ...]:
    """Conditional acceptance curve over a full simulated experiment.

    Streams outcomes straight into the curve counters instead of keeping
    per-position records for every run, so large replication counts stay
    cheap on memory.  Same randomness layout as ``run_experiment``: a given
    (seed, donor, replication) triple sees identical draws in both.
    """
    donors = tuple(population.donors)
    patients = tuple(population.patients)
    if not donors or not patients:
        raise ValueError("population must contain at least one donor and one patient")
    if replications < 1:
        raise ValueError(f"replications must be >= 1, got {replications}")
    run_size = run_size or RunSizeLaw()
    pools = build_compat_pools(patients)
    stream = RngStream(seed)

    def outcomes() -> Iterator[MatchRunOutcome]:
        for donor_pos in range(len(donors)):
            for rep in range(replications):
                _, outcome = simulate_one(
                    donors,
                    patients,
                    donor_pos,
                    rep,
                    stream,
                    params,
                    policy,
                    regime,
                    run_size=run_size,
                    pools=pools,
                    warn_shrink=rep == 0,
                )
                yield outcome

    return conditional_accept_curve(outcomes())


def cumulative_accept_prob(
    curve: Sequence[tuple[int, float]], n: int
) -> float:
    """Probability an organ is taken by sequence position n.

    Chains the conditional curve: sum over k <= n of (prob nobody before k
    accepted) times (conditional acceptance at k).  Positions missing from
    the curve contribute zero acceptance; the horizon is capped at 50.
    """
    if n < 1:
        raise ValueError(f"position must be >= 1, got {n}")
    by_position: dict[int, float] = {}
    for k, x in curve:
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"conditional probability at {k} out of range: {x}")
        by_position[int(k)] = float(x)
    total = 0.0
    survival = 1.0
    for k in range(1, min(int(n), 50) + 1):
        x = by_position.get(k, 0.0)
        total += survival * x
        survival *= 1.0 - x
    return total


_REPORT_COLUMNS = (
    "policy",
    "regime",
    "seed",
    "replications",
    "runs",
    "acceptances",
    "Allocation Rate (%)",
    "Accepted Sequence Number",
    "Acceptance Utility",
    "Total Acceptance Utility",
    "Acceptance Rate of High Quality (%)",
    "Rejection Rate of Low Quality (%)",
    "LAS",
    "Waiting Time (Month)",
    "Primary blood type match",
    "Distance (NM)",
)


def _cell(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_report_csv(reports: Iterable[ExperimentReport], path) -> None:
    """One row per experiment cell, percentage columns scaled to 0-100."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(_REPORT_COLUMNS)
        for r in reports:
            writer.writerow(
                [
                    r.policy.value,
                    r.regime.value,
                    r.seed,
                    r.replications,
                    r.n_runs,
                    r.n_accepted,
                    _cell(100.0 * r.allocation_rate),
                    _cell(r.mean_accepted_sequence),
                    _cell(r.mean_acceptance_utility),
                    _cell(r.total_acceptance_utility),
                    _cell(100.0 * r.accept_rate_high_quality),
                    _cell(100.0 * r.reject_rate_low_quality),
                    _cell(r.mean_accepted_las),
                    _cell(r.mean_accepted_waiting),
                    _cell(r.mean_accepted_blood_match),
                    _cell(r.mean_accepted_distance),
                ]
            )


def write_curve_csv(curve: Sequence[tuple[int, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["Sequence Number", "Conditional Acceptance Probability"])
        for k, x in curve:
            writer.writerow([k, _cell(float(x))])
