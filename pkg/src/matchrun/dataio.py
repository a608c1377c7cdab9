"""Synthetic populations and the CSV dataset format every command shares.

Generation draws each covariate from an independent truncated normal (or a
Bernoulli rate), places donors and patients uniformly on a disk so offer
distances have realistic spread, and then lets the simulator produce the
offer-level decision rows.  Persistence is three CSV files plus a flat
``key=value`` manifest; saving and re-loading a bundle reproduces the files
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .beliefs import InfoRegime
from .core import (
    BLOOD_TYPES,
    COVARIATE_NAMES,
    DonorProfile,
    ModelParams,
    PatientProfile,
    truncated_normal,
)
from .policies import PriorityPolicy
from .simulator import RngStream, RunSizeLaw, build_compat_pools, simulate_one

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "ParseError",
    "IntegrityError",
    "Moments",
    "GeneratorConfig",
    "OffersTable",
    "DatasetBundle",
    "default_truth",
    "config_hash",
    "generate_population",
    "generate_decisions",
    "validate_bundle",
    "save_bundle",
    "load_bundle",
]

SCHEMA_VERSION = "1"


class ConfigError(ValueError):
    """A generator configuration cannot produce a dataset."""


class ParseError(ValueError):
    """A dataset file failed to parse; the message names file and row."""


class IntegrityError(ValueError):
    """Dataset files parsed but violate a cross-file invariant."""


@dataclass(frozen=True)
class Moments:
    """Truncated-normal target: mean, spread, and hard bounds."""

    mean: float
    sd: float
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if self.sd < 0:
            raise ConfigError(f"sd must be nonnegative, got {self.sd}")
        if self.lower > self.upper:
            raise ConfigError(f"empty bounds [{self.lower}, {self.upper}]")
        if self.sd == 0 and not self.lower <= self.mean <= self.upper:
            raise ConfigError(
                f"degenerate mean {self.mean} outside [{self.lower}, {self.upper}]"
            )

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return truncated_normal(rng, self.mean, self.sd, self.lower, self.upper, size)


def _patient_moments() -> dict[str, Moments]:
    return {
        "age": Moments(55.9, 13.5, 12.0, 79.0),
        "las": Moments(43.3, 14.3, 5.9, 95.4),
        "waiting_time": Moments(3.4, 7.5, 0.0, 87.1),
        "bmi": Moments(25.5, 4.5, 15.0, 37.0),
        "height": Moments(168.0, 10.0, 140.0, 200.0),
    }


def _donor_moments() -> dict[str, Moments]:
    return {
        "age": Moments(38.2, 14.1, 7.0, 75.0),
        "weight": Moments(79.0, 20.8, 23.5, 170.7),
        "height": Moments(169.5, 10.8, 119.0, 198.5),
        "pf_ratio": Moments(419.3, 102.3, 80.0, 1400.0),
    }


# Rough US population ABO shares; the source data never reports these.
def _blood_freqs() -> dict[str, float]:
    return {"O": 0.45, "A": 0.40, "B": 0.11, "AB": 0.04}


def default_truth() -> ModelParams:
    """Parameter point used for synthetic data and counterfactual defaults.

    Scalar parameters and slope coefficients sit at the fitted values the
    package is calibrated around; the intercept is tuned so simulated
    allocation rates and acceptance curves land in the observed range.
    """
    beta = {
        "intercept": -16.05,
        "donor_pf_ratio": 0.001,
        "donor_age": 0.005,
        "donor_weight": -0.070,
        "donor_height": 0.071,
        "donor_iv_drug": -0.014,
        "donor_heavy_alcohol": -0.034,
        "donor_increased_risk": -0.149,
        "patient_las": 0.033,
        "patient_waiting_time": -0.024,
        "patient_bmi": 0.145,
        "patient_female": -0.053,
        "patient_diabetic": 0.130,
        "patient_prev_transplant": 0.439,
        "pair_blood_match": 0.775,
        "pair_distance_nm": -0.003,
        "pair_age_diff": 0.027,
        "pair_height_diff": 0.076,
        "pair_weight_diff": -0.064,
    }
    return ModelParams(
        mu=0.958,
        alpha=0.850,
        p=0.383,
        gamma=4.934,
        beta=np.array([beta[name] for name in COVARIATE_NAMES]),
    )


@dataclass(frozen=True)
class GeneratorConfig:
    n_donors: int = 548
    n_patients: int = 1348
    seed: int = 0
    disk_radius_nm: float = 274.0
    run_size: RunSizeLaw = field(default_factory=RunSizeLaw)
    patient_moments: Mapping[str, Moments] = field(default_factory=_patient_moments)
    patient_rates: Mapping[str, float] = field(
        default_factory=lambda: {"female": 0.517, "diabetic": 0.168, "prev_transplant": 0.036}
    )
    donor_moments: Mapping[str, Moments] = field(default_factory=_donor_moments)
    donor_rates: Mapping[str, float] = field(
        default_factory=lambda: {"heavy_alcohol": 0.177, "iv_drug": 0.060, "increased_risk": 0.212}
    )
    blood_freqs: Mapping[str, float] = field(default_factory=_blood_freqs)
    truth: ModelParams = field(default_factory=default_truth)

    def __post_init__(self) -> None:
        if self.n_donors < 1 or self.n_patients < 1:
            raise ConfigError("need at least one donor and one patient")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")
        if self.disk_radius_nm <= 0:
            raise ConfigError("disk radius must be positive")
        for name in ("age", "las", "waiting_time", "bmi", "height"):
            if name not in self.patient_moments:
                raise ConfigError(f"patient moments missing {name!r}")
        for name in ("age", "weight", "height", "pf_ratio"):
            if name not in self.donor_moments:
                raise ConfigError(f"donor moments missing {name!r}")
        for rates in (self.patient_rates, self.donor_rates):
            for name, rate in rates.items():
                if not 0.0 <= rate <= 1.0:
                    raise ConfigError(f"rate {name}={rate} outside [0, 1]")
        if set(self.blood_freqs) != set(BLOOD_TYPES):
            raise ConfigError(f"blood frequencies must cover exactly {BLOOD_TYPES}")
        total = sum(self.blood_freqs.values())
        if abs(total - 1.0) > 1e-6 or min(self.blood_freqs.values()) < 0:
            raise ConfigError(f"blood frequencies must be nonnegative and sum to 1, got {total}")


def config_hash(config: GeneratorConfig) -> str:
    """Short stable digest of everything that shapes a generated bundle."""
    payload = {
        "n_donors": config.n_donors,
        "n_patients": config.n_patients,
        "seed": config.seed,
        "disk_radius_nm": config.disk_radius_nm,
        "run_size": [config.run_size.mean, config.run_size.sd, config.run_size.lower, config.run_size.upper],
        "patient_moments": {
            k: [m.mean, m.sd, m.lower, m.upper] for k, m in sorted(config.patient_moments.items())
        },
        "patient_rates": dict(sorted(config.patient_rates.items())),
        "donor_moments": {
            k: [m.mean, m.sd, m.lower, m.upper] for k, m in sorted(config.donor_moments.items())
        },
        "donor_rates": dict(sorted(config.donor_rates.items())),
        "blood_freqs": dict(sorted(config.blood_freqs.items())),
        "truth": {
            "mu": config.truth.mu,
            "alpha": config.truth.alpha,
            "p": config.truth.p,
            "gamma": config.truth.gamma,
            "beta": [float(b) for b in config.truth.beta],
        },
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class OffersTable:
    """Column store of offer rows, grouped by donor in run order."""

    donor_ids: np.ndarray
    patient_ids: np.ndarray
    sequence_numbers: np.ndarray
    provisional_yes: np.ndarray
    final_decisions: np.ndarray
    blood_match: np.ndarray
    distance_nm: np.ndarray
    age_diff: np.ndarray
    height_diff: np.ndarray
    weight_diff: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.donor_ids)
        for f in fields(self):
            if len(getattr(self, f.name)) != n:
                raise ValueError(f"column {f.name} has mismatched length")

    def __len__(self) -> int:
        return len(self.donor_ids)

    @cached_property
    def run_slices(self) -> tuple[tuple[str, slice], ...]:
        """(donor id, row slice) per match run, in file order."""
        out = []
        start = 0
        for i in range(1, len(self) + 1):
            if i == len(self) or self.donor_ids[i] != self.donor_ids[start]:
                out.append((str(self.donor_ids[start]), slice(start, i)))
                start = i
        return tuple(out)

    @classmethod
    def empty(cls) -> "OffersTable":
        return cls(
            donor_ids=np.array([], dtype=object),
            patient_ids=np.array([], dtype=object),
            sequence_numbers=np.array([], dtype=np.int64),
            provisional_yes=np.array([], dtype=np.int64),
            final_decisions=np.array([], dtype=object),
            blood_match=np.array([], dtype=np.int64),
            distance_nm=np.array([], dtype=float),
            age_diff=np.array([], dtype=float),
            height_diff=np.array([], dtype=float),
            weight_diff=np.array([], dtype=float),
        )


@dataclass(frozen=True)
class DatasetBundle:
    donors: tuple[DonorProfile, ...]
    patients: tuple[PatientProfile, ...]
    offers: OffersTable | None
    manifest: dict[str, str]

    @cached_property
    def donor_by_id(self) -> dict[str, DonorProfile]:
        return {d.id: d for d in self.donors}

    @cached_property
    def patient_by_id(self) -> dict[str, PatientProfile]:
        return {p.id: p for p in self.patients}

    def truth_params(self) -> ModelParams | None:
        """Recover generating parameters from the manifest, if recorded."""
        if "truth_mu" not in self.manifest:
            return None
        beta = np.array(
            [float(self.manifest[f"truth_beta_{name}"]) for name in COVARIATE_NAMES]
        )
        return ModelParams(
            mu=float(self.manifest["truth_mu"]),
            alpha=float(self.manifest["truth_alpha"]),
            p=float(self.manifest["truth_p"]),
            gamma=float(self.manifest["truth_gamma"]),
            beta=beta,
        )


def _truth_manifest(truth: ModelParams) -> dict[str, str]:
    out = {
        "truth_mu": repr(truth.mu),
        "truth_alpha": repr(truth.alpha),
        "truth_p": repr(truth.p),
        "truth_gamma": repr(truth.gamma),
    }
    for name, value in truth.beta_named().items():
        out[f"truth_beta_{name}"] = repr(value)
    return out


def generate_population(config: GeneratorConfig) -> DatasetBundle:
    """Draw donor and patient profiles; no offers yet.

    Patient weight is derived from BMI and height rather than drawn, so BMI
    keeps its configured moments exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    donors = _draw_donors(config, rng)
    patients = _draw_patients(config, rng)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "population",
        "seed": str(config.seed),
        "config_hash": config_hash(config),
        "n_donors": str(config.n_donors),
        "n_patients": str(config.n_patients),
        **_truth_manifest(config.truth),
    }
    bundle = DatasetBundle(
        donors=tuple(donors), patients=tuple(patients), offers=None, manifest=manifest
    )
    validate_bundle(bundle)
    return bundle


def _disk_points(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    angle = 2.0 * math.pi * rng.random(n)
    return np.column_stack([r * np.cos(angle), r * np.sin(angle)])


def _draw_donors(config: GeneratorConfig, rng: np.random.Generator) -> list[DonorProfile]:
    n = config.n_donors
    m = config.donor_moments
    age = m["age"].sample(rng, n)
    weight = m["weight"].sample(rng, n)
    height = m["height"].sample(rng, n)
    pf = m["pf_ratio"].sample(rng, n)
    alcohol = rng.random(n) < config.donor_rates["heavy_alcohol"]
    iv = rng.random(n) < config.donor_rates["iv_drug"]
    risk = rng.random(n) < config.donor_rates["increased_risk"]
    blood = rng.choice(
        BLOOD_TYPES, size=n, p=[config.blood_freqs[b] for b in BLOOD_TYPES]
    )
    points = _disk_points(rng, n, config.disk_radius_nm)
    width = len(str(n))
    return [
        DonorProfile(
            id=f"D{i + 1:0{width}d}",
            age=float(age[i]),
            weight=float(weight[i]),
            height=float(height[i]),
            pf_ratio=float(pf[i]),
            heavy_alcohol=bool(alcohol[i]),
            iv_drug=bool(iv[i]),
            increased_risk=bool(risk[i]),
            blood_type=str(blood[i]),
            location=(float(points[i, 0]), float(points[i, 1])),
        )
        for i in range(n)
    ]


def _draw_patients(config: GeneratorConfig, rng: np.random.Generator) -> list[PatientProfile]:
    n = config.n_patients
    m = config.patient_moments
    age = m["age"].sample(rng, n)
    las = m["las"].sample(rng, n)
    waiting = m["waiting_time"].sample(rng, n)
    bmi = m["bmi"].sample(rng, n)
    height = m["height"].sample(rng, n)
    female = rng.random(n) < config.patient_rates["female"]
    diabetic = rng.random(n) < config.patient_rates["diabetic"]
    prev = rng.random(n) < config.patient_rates["prev_transplant"]
    blood = rng.choice(
        BLOOD_TYPES, size=n, p=[config.blood_freqs[b] for b in BLOOD_TYPES]
    )
    points = _disk_points(rng, n, config.disk_radius_nm)
    width = len(str(n))
    return [
        PatientProfile(
            id=f"P{i + 1:0{width}d}",
            las=float(las[i]),
            waiting_time=float(waiting[i]),
            bmi=float(bmi[i]),
            female=bool(female[i]),
            diabetic=bool(diabetic[i]),
            prev_transplant=bool(prev[i]),
            blood_type=str(blood[i]),
            location=(float(points[i, 0]), float(points[i, 1])),
            age=float(age[i]),
            height=float(height[i]),
            weight=float(bmi[i] * (height[i] / 100.0) ** 2),
        )
        for i in range(n)
    ]


def generate_decisions(
    bundle: DatasetBundle,
    truth: ModelParams,
    policy: PriorityPolicy,
    regime: InfoRegime,
    seed: int,
    *,
    run_size: RunSizeLaw | None = None,
    truncate: bool = True,
) -> DatasetBundle:
    """Simulate one match run per donor and serialize it as offer rows.

    Accepted runs are truncated at the accepting row, mirroring how real
    offer data stops once an organ is taken.  The truth parameters go into
    the manifest so estimation tests can score themselves later.

    ``truncate=False`` keeps every recorded decision, including willing
    takers ranked after the winner under the counterfactual regimes.  Such
    a panel is for in-memory analysis only: it fails :func:`validate_bundle`
    (several accept rows per run) and cannot be saved or reloaded.
    """
    run_size = run_size or RunSizeLaw()
    pools = build_compat_pools(bundle.patients)
    stream = RngStream(seed)

    cols: dict[str, list] = {name: [] for name in (
        "donor_ids", "patient_ids", "sequence_numbers", "provisional_yes",
        "final_decisions", "blood_match", "distance_nm", "age_diff",
        "height_diff", "weight_diff",
    )}
    for donor_pos in range(len(bundle.donors)):
        ranked, outcome = simulate_one(
            bundle.donors,
            bundle.patients,
            donor_pos,
            0,
            stream,
            truth,
            policy,
            regime,
            run_size=run_size,
            pools=pools,
        )
        for record in outcome.records:
            entry = ranked.entries[record.sequence_number - 1]
            cols["donor_ids"].append(ranked.donor.id)
            cols["patient_ids"].append(entry.patient.id)
            cols["sequence_numbers"].append(record.sequence_number)
            cols["provisional_yes"].append(int(record.provisional_yes))
            cols["final_decisions"].append(record.final_decision)
            cols["blood_match"].append(entry.pair.primary_blood_match)
            cols["distance_nm"].append(entry.pair.distance_nm)
            cols["age_diff"].append(entry.pair.age_diff)
            cols["height_diff"].append(entry.pair.height_diff)
            cols["weight_diff"].append(entry.pair.weight_diff)
            if truncate and record.final_decision == "A":
                # Regimes where everyone answers can produce several willing
                # takers; the organ goes to the first, and the panel stops
                # there just as real extracts stop at the allocation.
                break

    offers = OffersTable(
        donor_ids=np.array(cols["donor_ids"], dtype=object),
        patient_ids=np.array(cols["patient_ids"], dtype=object),
        sequence_numbers=np.array(cols["sequence_numbers"], dtype=np.int64),
        provisional_yes=np.array(cols["provisional_yes"], dtype=np.int64),
        final_decisions=np.array(cols["final_decisions"], dtype=object),
        blood_match=np.array(cols["blood_match"], dtype=np.int64),
        distance_nm=np.array(cols["distance_nm"], dtype=float),
        age_diff=np.array(cols["age_diff"], dtype=float),
        height_diff=np.array(cols["height_diff"], dtype=float),
        weight_diff=np.array(cols["weight_diff"], dtype=float),
    )
    manifest = dict(bundle.manifest)
    manifest.update(
        kind="decisions",
        seed=str(seed),
        policy=policy.value,
        regime=regime.value,
        run_size=repr((run_size.mean, run_size.sd, run_size.lower, run_size.upper)),
        **_truth_manifest(truth),
    )
    out = DatasetBundle(
        donors=bundle.donors, patients=bundle.patients, offers=offers, manifest=manifest
    )
    if truncate:
        validate_bundle(out)
    return out


def validate_bundle(bundle: DatasetBundle) -> None:
    """Enforce the cross-file invariants; raises IntegrityError."""
    if len(bundle.donor_by_id) != len(bundle.donors):
        raise IntegrityError("duplicate donor ids")
    if len(bundle.patient_by_id) != len(bundle.patients):
        raise IntegrityError("duplicate patient ids")
    offers = bundle.offers
    if offers is None:
        return
    seen_runs: set[str] = set()
    for donor_id, rows in offers.run_slices:
        if donor_id in seen_runs:
            raise IntegrityError(
                f"offers for donor {donor_id} are split into non-adjacent blocks"
            )
        seen_runs.add(donor_id)
        if donor_id not in bundle.donor_by_id:
            raise IntegrityError(
                f"offers row {rows.start + 2}: unknown donor id {donor_id!r}"
            )
        accept_rows = []
        for offset, i in enumerate(range(rows.start, rows.stop)):
            row_no = i + 2  # header is row 1
            patient_id = str(offers.patient_ids[i])
            if patient_id not in bundle.patient_by_id:
                raise IntegrityError(f"offers row {row_no}: unknown patient id {patient_id!r}")
            if offers.sequence_numbers[i] != offset + 1:
                raise IntegrityError(
                    f"offers row {row_no}: sequence number "
                    f"{offers.sequence_numbers[i]} breaks the 1..n run order"
                )
            provisional = offers.provisional_yes[i]
            decision = str(offers.final_decisions[i])
            if provisional not in (0, 1):
                raise IntegrityError(f"offers row {row_no}: provisional flag {provisional}")
            if (decision == "NA") != (provisional == 0):
                raise IntegrityError(
                    f"offers row {row_no}: decision {decision!r} inconsistent with "
                    f"provisional flag {provisional}"
                )
            if decision == "A":
                accept_rows.append(i)
        if len(accept_rows) > 1:
            raise IntegrityError(f"donor {donor_id}: multiple accepted rows")
        if accept_rows and accept_rows[0] != rows.stop - 1:
            raise IntegrityError(
                f"donor {donor_id}: acceptance at row {accept_rows[0] + 2} is not "
                "the last row of its run"
            )


_DONOR_COLUMNS = (
    "donor_id", "age", "weight", "height", "pf_ratio", "heavy_alcohol",
    "iv_drug", "increased_risk", "blood_type", "loc_x", "loc_y",
)
_PATIENT_COLUMNS = (
    "patient_id", "las", "waiting_time", "bmi", "female", "diabetic",
    "prev_transplant", "blood_type", "loc_x", "loc_y", "age", "height", "weight",
)
_OFFER_COLUMNS = (
    "donor_id", "patient_id", "sequence_number", "provisional_yes",
    "final_decision", "primary_blood_match", "distance_nm", "age_diff",
    "height_diff", "weight_diff",
)


def save_bundle(bundle: DatasetBundle, path: str) -> None:
    """Write donors.csv / patients.csv / offers.csv / manifest.txt.

    Validates first, so panels that only make sense in memory (untruncated
    counterfactual decisions) cannot end up on disk.
    """
    validate_bundle(bundle)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "donors.csv"), "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(_DONOR_COLUMNS)
        for d in bundle.donors:
            writer.writerow(
                [
                    d.id, repr(d.age), repr(d.weight), repr(d.height), repr(d.pf_ratio),
                    int(d.heavy_alcohol), int(d.iv_drug), int(d.increased_risk),
                    d.blood_type, repr(d.location[0]), repr(d.location[1]),
                ]
            )
    with open(os.path.join(path, "patients.csv"), "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(_PATIENT_COLUMNS)
        for p in bundle.patients:
            writer.writerow(
                [
                    p.id, repr(p.las), repr(p.waiting_time), repr(p.bmi),
                    int(p.female), int(p.diabetic), int(p.prev_transplant),
                    p.blood_type, repr(p.location[0]), repr(p.location[1]),
                    repr(p.age), repr(p.height), repr(p.weight),
                ]
            )
    if bundle.offers is not None:
        offers = bundle.offers
        with open(os.path.join(path, "offers.csv"), "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(_OFFER_COLUMNS)
            for i in range(len(offers)):
                writer.writerow(
                    [
                        offers.donor_ids[i],
                        offers.patient_ids[i],
                        int(offers.sequence_numbers[i]),
                        int(offers.provisional_yes[i]),
                        offers.final_decisions[i],
                        int(offers.blood_match[i]),
                        repr(float(offers.distance_nm[i])),
                        repr(float(offers.age_diff[i])),
                        repr(float(offers.height_diff[i])),
                        repr(float(offers.weight_diff[i])),
                    ]
                )
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as handle:
        for key in sorted(bundle.manifest):
            handle.write(f"{key}={bundle.manifest[key]}\n")


def _read_rows(path: str, filename: str, required: Sequence[str]):
    full = os.path.join(path, filename)
    try:
        handle = open(full, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"{filename}: file not found under {path}") from None
    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"{filename}: missing columns {missing}")
        return list(reader)


def _parse(filename: str, row_no: int, column: str, raw: str, kind):
    try:
        if kind is bool:
            if raw not in ("0", "1"):
                raise ValueError(f"expected 0/1, got {raw!r}")
            return raw == "1"
        return kind(raw)
    except ValueError as err:
        raise ParseError(f"{filename} row {row_no}: bad {column}: {err}") from None


def load_bundle(path: str) -> DatasetBundle:
    """Parse and validate a saved bundle (offers.csv optional)."""
    manifest: dict[str, str] = {}
    manifest_path = os.path.join(path, "manifest.txt")
    try:
        with open(manifest_path, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError(f"manifest.txt row {line_no}: expected key=value")
                key, value = line.split("=", 1)
                manifest[key] = value
    except FileNotFoundError:
        raise ParseError(f"manifest.txt: file not found under {path}") from None
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ParseError(
            f"manifest.txt: schema_version {version!r} unsupported (need {SCHEMA_VERSION!r})"
        )

    donors = []
    for row_no, row in enumerate(_read_rows(path, "donors.csv", _DONOR_COLUMNS), start=2):
        try:
            donors.append(
                DonorProfile(
                    id=row["donor_id"],
                    age=_parse("donors.csv", row_no, "age", row["age"], float),
                    weight=_parse("donors.csv", row_no, "weight", row["weight"], float),
                    height=_parse("donors.csv", row_no, "height", row["height"], float),
                    pf_ratio=_parse("donors.csv", row_no, "pf_ratio", row["pf_ratio"], float),
                    heavy_alcohol=_parse("donors.csv", row_no, "heavy_alcohol", row["heavy_alcohol"], bool),
                    iv_drug=_parse("donors.csv", row_no, "iv_drug", row["iv_drug"], bool),
                    increased_risk=_parse("donors.csv", row_no, "increased_risk", row["increased_risk"], bool),
                    blood_type=row["blood_type"],
                    location=(
                        _parse("donors.csv", row_no, "loc_x", row["loc_x"], float),
                        _parse("donors.csv", row_no, "loc_y", row["loc_y"], float),
                    ),
                )
            )
        except ValueError as err:
            if isinstance(err, ParseError):
                raise
            raise ParseError(f"donors.csv row {row_no}: {err}") from None

    patients = []
    for row_no, row in enumerate(_read_rows(path, "patients.csv", _PATIENT_COLUMNS), start=2):
        try:
            patients.append(
                PatientProfile(
                    id=row["patient_id"],
                    las=_parse("patients.csv", row_no, "las", row["las"], float),
                    waiting_time=_parse("patients.csv", row_no, "waiting_time", row["waiting_time"], float),
                    bmi=_parse("patients.csv", row_no, "bmi", row["bmi"], float),
                    female=_parse("patients.csv", row_no, "female", row["female"], bool),
                    diabetic=_parse("patients.csv", row_no, "diabetic", row["diabetic"], bool),
                    prev_transplant=_parse("patients.csv", row_no, "prev_transplant", row["prev_transplant"], bool),
                    blood_type=row["blood_type"],
                    location=(
                        _parse("patients.csv", row_no, "loc_x", row["loc_x"], float),
                        _parse("patients.csv", row_no, "loc_y", row["loc_y"], float),
                    ),
                    age=_parse("patients.csv", row_no, "age", row["age"], float),
                    height=_parse("patients.csv", row_no, "height", row["height"], float),
                    weight=_parse("patients.csv", row_no, "weight", row["weight"], float),
                )
            )
        except ValueError as err:
            if isinstance(err, ParseError):
                raise
            raise ParseError(f"patients.csv row {row_no}: {err}") from None

    offers = None
    if os.path.exists(os.path.join(path, "offers.csv")):
        rows = _read_rows(path, "offers.csv", _OFFER_COLUMNS)
        decisions = []
        for row_no, row in enumerate(rows, start=2):
            decision = row["final_decision"]
            if decision not in ("A", "R", "NA"):
                raise ParseError(
                    f"offers.csv row {row_no}: final_decision must be A/R/NA, got {decision!r}"
                )
            decisions.append(decision)
        offers = OffersTable(
            donor_ids=np.array([r["donor_id"] for r in rows], dtype=object),
            patient_ids=np.array([r["patient_id"] for r in rows], dtype=object),
            sequence_numbers=np.array(
                [
                    _parse("offers.csv", i + 2, "sequence_number", r["sequence_number"], int)
                    for i, r in enumerate(rows)
                ],
                dtype=np.int64,
            ),
            provisional_yes=np.array(
                [
                    _parse("offers.csv", i + 2, "provisional_yes", r["provisional_yes"], int)
                    for i, r in enumerate(rows)
                ],
                dtype=np.int64,
            ),
            final_decisions=np.array(decisions, dtype=object),
            blood_match=np.array(
                [
                    _parse("offers.csv", i + 2, "primary_blood_match", r["primary_blood_match"], int)
                    for i, r in enumerate(rows)
                ],
                dtype=np.int64,
            ),
            distance_nm=np.array(
                [
                    _parse("offers.csv", i + 2, "distance_nm", r["distance_nm"], float)
                    for i, r in enumerate(rows)
                ],
                dtype=float,
            ),
            age_diff=np.array(
                [
                    _parse("offers.csv", i + 2, "age_diff", r["age_diff"], float)
                    for i, r in enumerate(rows)
                ],
                dtype=float,
            ),
            height_diff=np.array(
                [
                    _parse("offers.csv", i + 2, "height_diff", r["height_diff"], float)
                    for i, r in enumerate(rows)
                ],
                dtype=float,
            ),
            weight_diff=np.array(
                [
                    _parse("offers.csv", i + 2, "weight_diff", r["weight_diff"], float)
                    for i, r in enumerate(rows)
                ],
                dtype=float,
            ),
        )

    bundle = DatasetBundle(
        donors=tuple(donors), patients=tuple(patients), offers=offers, manifest=manifest
    )
    validate_bundle(bundle)
    return bundle
