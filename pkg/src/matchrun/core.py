"""Domain records, the shared covariate registry, and the acceptance algebra.

Everything downstream (ranking policies, the simulator, the structural
estimator, the reduced-form regressions) assembles covariate rows through the
single layout frozen here, so a row built anywhere in the package lines up
with any coefficient vector built anywhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import _stepmath

__all__ = [
    "EULER_GAMMA",
    "COVARIATE_NAMES",
    "BLOOD_TYPES",
    "ZONE_BANDS",
    "LayoutError",
    "Quality",
    "Signal",
    "DonorProfile",
    "PatientProfile",
    "PairCovariates",
    "ModelParams",
    "blood_match_level",
    "zone_from_distance",
    "covariate_row",
    "utility_index",
    "logistic_cdf",
    "accept_probability",
    "exante_accept_utility",
    "truncated_normal",
]

EULER_GAMMA = 0.577215664901532

# Canonical covariate layout: intercept, donor block, patient block, pair
# block.  Every coefficient vector in the package is aligned to this tuple.
COVARIATE_NAMES: tuple[str, ...] = (
    "intercept",
    "donor_pf_ratio",
    "donor_age",
    "donor_weight",
    "donor_height",
    "donor_iv_drug",
    "donor_heavy_alcohol",
    "donor_increased_risk",
    "patient_las",
    "patient_waiting_time",
    "patient_bmi",
    "patient_female",
    "patient_diabetic",
    "patient_prev_transplant",
    "pair_blood_match",
    "pair_distance_nm",
    "pair_age_diff",
    "pair_height_diff",
    "pair_weight_diff",
)

BLOOD_TYPES = ("O", "A", "B", "AB")

# Distance bands (nautical miles) for allocation zones.
ZONE_BANDS = (
    ("A", 0.0, 250.0),
    ("B", 250.0, 500.0),
    ("C", 500.0, 1000.0),
    ("D", 1000.0, 1500.0),
    ("E", 1500.0, 2500.0),
)

# Donor -> patient blood-type pairs counted as primary (2) vs secondary (1)
# matches; anything else is incompatible (0).
_PRIMARY_MATCHES = frozenset(
    [("O", "O"), ("A", "A"), ("B", "B"), ("AB", "AB"), ("O", "B"), ("A", "AB"), ("B", "AB")]
)
_SECONDARY_MATCHES = frozenset([("O", "A"), ("O", "AB")])


class LayoutError(ValueError):
    """A covariate row or coefficient vector does not match the registry."""


class Quality(IntEnum):
    """Latent donor quality, encoded +/-1 so E[quality] = 2q - 1 is literal."""

    HIGH = 1
    LOW = -1


class Signal(IntEnum):
    """Private quality signal, aligned with Quality with precision alpha."""

    POSITIVE = 1
    NEGATIVE = -1


def _check_blood_type(value: str, owner: str) -> None:
    if value not in BLOOD_TYPES:
        raise ValueError(f"{owner}: unknown blood type {value!r}")


@dataclass(frozen=True)
class DonorProfile:
    id: str
    age: float
    weight: float
    height: float
    pf_ratio: float
    heavy_alcohol: bool
    iv_drug: bool
    increased_risk: bool
    blood_type: str
    location: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        _check_blood_type(self.blood_type, f"donor {self.id}")
        if self.pf_ratio <= 0:
            raise ValueError(f"donor {self.id}: pf_ratio must be positive")
        if self.age < 0 or self.weight <= 0 or self.height <= 0:
            raise ValueError(f"donor {self.id}: implausible age/weight/height")


@dataclass(frozen=True)
class PatientProfile:
    id: str
    las: float
    waiting_time: float
    bmi: float
    female: bool
    diabetic: bool
    prev_transplant: bool
    blood_type: str
    location: tuple[float, float]
    # Needed to form the pair difference covariates for freshly sampled
    # donor-patient pairs; not part of the utility index on their own.
    age: float = 55.0
    height: float = 168.0
    weight: float = 72.0

    def __post_init__(self) -> None:
        _check_blood_type(self.blood_type, f"patient {self.id}")
        if not 0.0 <= self.las <= 100.0:
            raise ValueError(f"patient {self.id}: las must lie in [0, 100]")
        if self.waiting_time < 0:
            raise ValueError(f"patient {self.id}: negative waiting time")


def blood_match_level(donor_type: str, patient_type: str) -> int:
    """2 for a primary match, 1 for secondary, 0 for incompatible."""
    _check_blood_type(donor_type, "donor")
    _check_blood_type(patient_type, "patient")
    pair = (donor_type, patient_type)
    if pair in _PRIMARY_MATCHES:
        return 2
    if pair in _SECONDARY_MATCHES:
        return 1
    return 0


def zone_from_distance(distance_nm: float) -> str:
    if not math.isfinite(distance_nm) or distance_nm < 0:
        raise ValueError(f"distance must be finite and nonnegative, got {distance_nm}")
    for label, lo, hi in ZONE_BANDS:
        if lo <= distance_nm < hi:
            return label
    if distance_nm == 2500.0:
        return "E"
    raise ValueError(f"distance {distance_nm} NM exceeds the outermost zone band (2500)")


@dataclass(frozen=True)
class PairCovariates:
    """Compatibility covariates for one donor-patient pair.

    ``zone`` is derived from distance rather than stored, so the two can
    never disagree.
    """

    primary_blood_match: int
    distance_nm: float
    age_diff: float
    height_diff: float
    weight_diff: float

    def __post_init__(self) -> None:
        if self.primary_blood_match not in (0, 1, 2):
            raise ValueError(f"blood match level must be 0/1/2, got {self.primary_blood_match}")
        zone_from_distance(self.distance_nm)  # validates the band

    @property
    def zone(self) -> str:
        return zone_from_distance(self.distance_nm)

    @classmethod
    def from_profiles(cls, donor: DonorProfile, patient: PatientProfile) -> "PairCovariates":
        dx = donor.location[0] - patient.location[0]
        dy = donor.location[1] - patient.location[1]
        return cls(
            primary_blood_match=blood_match_level(donor.blood_type, patient.blood_type),
            distance_nm=math.hypot(dx, dy),
            age_diff=donor.age - patient.age,
            height_diff=donor.height - patient.height,
            weight_diff=donor.weight - patient.weight,
        )


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Structural parameters: (mu, alpha, p, gamma) plus the utility betas.

    ``beta`` is aligned with COVARIATE_NAMES; omitting it gives a zero
    vector, which is convenient in belief-level tests where only the scalar
    parameters matter.
    """

    mu: float = 0.5
    alpha: float = 0.75
    p: float = 0.5
    gamma: float = 1.0
    beta: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"mu must lie in (0, 1), got {self.mu}")
        if not 0.5 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0.5, 1), got {self.alpha}")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        beta = self.beta
        if beta is None:
            beta = np.zeros(len(COVARIATE_NAMES))
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (len(COVARIATE_NAMES),):
            raise LayoutError(
                f"beta has shape {beta.shape}, expected ({len(COVARIATE_NAMES)},) "
                "matching the covariate registry"
            )
        beta = beta.copy()
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)

    def beta_named(self) -> dict[str, float]:
        return dict(zip(COVARIATE_NAMES, (float(b) for b in self.beta)))


def covariate_row(
    donor: DonorProfile, patient: PatientProfile, pair: PairCovariates
) -> np.ndarray:
    """Assemble (1, donor block, patient block, pair block) per the registry."""
    return np.array(
        [
            1.0,
            donor.pf_ratio,
            donor.age,
            donor.weight,
            donor.height,
            float(donor.iv_drug),
            float(donor.heavy_alcohol),
            float(donor.increased_risk),
            patient.las,
            patient.waiting_time,
            patient.bmi,
            float(patient.female),
            float(patient.diabetic),
            float(patient.prev_transplant),
            float(pair.primary_blood_match),
            pair.distance_nm,
            pair.age_diff,
            pair.height_diff,
            pair.weight_diff,
        ]
    )


def utility_index(
    donor: DonorProfile,
    patient: PatientProfile,
    pair: PairCovariates,
    beta: Sequence[float] | np.ndarray,
) -> float:
    """Deterministic part of the acceptance utility for one offer."""
    row = covariate_row(donor, patient, pair)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != row.shape:
        raise LayoutError(
            f"coefficient vector has shape {beta.shape}, covariate row has {row.shape}"
        )
    return float(row @ beta)


def logistic_cdf(x):
    """Logistic CDF; scalar in, scalar out (arrays pass through elementwise)."""
    if np.ndim(x) == 0:
        return _stepmath.logistic(float(x))
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def accept_probability(index: float, expected_quality: float, gamma: float) -> float:
    """Probability a patient accepts given the index and E[quality]."""
    if not -1.0 <= expected_quality <= 1.0:
        raise ValueError(f"expected quality must lie in [-1, 1], got {expected_quality}")
    return logistic_cdf(index + gamma * expected_quality)


def exante_accept_utility(index: float, quality: int, gamma: float) -> float:
    """Ex-ante maximum expected utility of an accepting patient.

    Euler's constant plus log(1 + exp(index + gamma * quality)), written so
    large arguments reduce to c + argument instead of overflowing.
    """
    z = index + gamma * int(quality)
    if z > 0:
        softplus = z + math.log1p(math.exp(-z))
    else:
        softplus = math.log1p(math.exp(z))
    return EULER_GAMMA + softplus


def truncated_normal(
    rng: np.random.Generator,
    mean: float,
    sd: float,
    lower: float,
    upper: float,
    size: int | None = None,
    max_attempts: int = 1000,
):
    """Normal(mean, sd) draws restricted to [lower, upper], by rejection.

    After ``max_attempts`` rounds any still-unfilled slots take a clamped
    draw, so the sampler always terminates even for badly placed bounds.
    ``sd = 0`` degenerates to the (in-bounds) mean.  Scalar when ``size`` is
    None, else a 1-d array of that length.
    """
    if lower > upper:
        raise ValueError(f"empty truncation interval [{lower}, {upper}]")
    if sd < 0:
        raise ValueError(f"sd must be nonnegative, got {sd}")
    if sd == 0:
        if not lower <= mean <= upper:
            raise ValueError(
                f"degenerate draw at mean {mean} falls outside [{lower}, {upper}]"
            )
        return mean if size is None else np.full(size, float(mean))
    n = 1 if size is None else int(size)
    out = np.empty(n)
    pending = np.arange(n)
    for _ in range(max_attempts):
        if pending.size == 0:
            break
        draw = rng.normal(mean, sd, pending.size)
        ok = (draw >= lower) & (draw <= upper)
        out[pending[ok]] = draw[ok]
        pending = pending[~ok]
    if pending.size:
        out[pending] = np.clip(rng.normal(mean, sd, pending.size), lower, upper)
    return float(out[0]) if size is None else out
