"""Synthetic data generation and the on-disk bundle format."""

import numpy as np
import pytest

from matchrun.beliefs import InfoRegime
from matchrun.core import BLOOD_TYPES, truncated_normal
from matchrun.dataio import (
    ConfigError,
    DatasetBundle,
    GeneratorConfig,
    IntegrityError,
    Moments,
    OffersTable,
    ParseError,
    RunSizeLaw,
    config_hash,
    default_truth,
    generate_decisions,
    generate_population,
    load_bundle,
    save_bundle,
    validate_bundle,
)
from matchrun.policies import PriorityPolicy


@pytest.fixture(scope="module")
def population():
    return generate_population(GeneratorConfig(n_donors=40, n_patients=400, seed=3))


@pytest.fixture(scope="module")
def decisions(population):
    return generate_decisions(
        population,
        default_truth(),
        PriorityPolicy.OPTN,
        InfoRegime.SOCIAL_LEARNING,
        seed=14,
        run_size=RunSizeLaw(mean=20.0, sd=10.0, lower=1.0, upper=60.0),
    )


# --- configuration ---------------------------------------------------------------

def test_config_validation_messages():
    with pytest.raises(ConfigError, match="at least one donor"):
        GeneratorConfig(n_donors=0)
    with pytest.raises(ConfigError, match="seed"):
        GeneratorConfig(seed=-2)
    with pytest.raises(ConfigError, match="disk radius"):
        GeneratorConfig(disk_radius_nm=0.0)
    with pytest.raises(ConfigError, match="missing 'las'"):
        GeneratorConfig(patient_moments={"age": Moments(55, 10, 10, 80)})
    with pytest.raises(ConfigError, match="outside"):
        GeneratorConfig(patient_rates={"female": 1.2, "diabetic": 0.1, "prev_transplant": 0.0})
    with pytest.raises(ConfigError, match="sum to 1"):
        GeneratorConfig(blood_freqs={"O": 0.5, "A": 0.5, "B": 0.2, "AB": 0.1})
    with pytest.raises(ConfigError, match="cover exactly"):
        GeneratorConfig(blood_freqs={"O": 1.0})


def test_moments_validation():
    with pytest.raises(ConfigError, match="sd"):
        Moments(0.0, -1.0, 0.0, 1.0)
    with pytest.raises(ConfigError, match="empty bounds"):
        Moments(0.0, 1.0, 2.0, 1.0)
    with pytest.raises(ConfigError, match="degenerate mean"):
        Moments(5.0, 0.0, 0.0, 1.0)


def test_config_hash_is_stable_and_sensitive():
    base = GeneratorConfig(seed=1)
    assert config_hash(base) == config_hash(GeneratorConfig(seed=1))
    assert config_hash(base) != config_hash(GeneratorConfig(seed=2))
    assert config_hash(base) != config_hash(GeneratorConfig(seed=1, n_donors=549))
    reordered = GeneratorConfig(
        seed=1, blood_freqs={"AB": 0.04, "B": 0.11, "A": 0.40, "O": 0.45}
    )
    assert config_hash(base) == config_hash(reordered)


# --- population generator ----------------------------------------------------------

def test_population_counts_and_ids(population):
    assert len(population.donors) == 40
    assert len(population.patients) == 400
    assert len({d.id for d in population.donors}) == 40
    assert len({p.id for p in population.patients}) == 400
    assert population.offers is None
    assert population.manifest["kind"] == "population"


def test_population_fields_within_bounds(population):
    config = GeneratorConfig(n_donors=40, n_patients=400, seed=3)
    for p in population.patients:
        assert p.blood_type in BLOOD_TYPES
        m = config.patient_moments["las"]
        assert m.lower <= p.las <= m.upper
        assert np.hypot(*p.location) <= config.disk_radius_nm + 1e-9
    for d in population.donors:
        m = config.donor_moments["pf_ratio"]
        assert m.lower <= d.pf_ratio <= m.upper
        assert np.hypot(*d.location) <= config.disk_radius_nm + 1e-9


def test_population_matches_target_moments():
    bundle = generate_population(GeneratorConfig(n_donors=300, n_patients=3000, seed=8))
    config = GeneratorConfig(n_donors=300, n_patients=3000, seed=8)

    rng = np.random.default_rng(0)
    for name in ("las", "waiting_time", "bmi"):
        m = config.patient_moments[name]
        oracle = truncated_normal(rng, m.mean, m.sd, m.lower, m.upper, 200_000)
        sample = np.array([getattr(p, name) for p in bundle.patients])
        budget = 4.0 * sample.std() / np.sqrt(sample.size) + 0.01 * m.sd
        assert abs(sample.mean() - oracle.mean()) < budget, name

    female = np.mean([p.female for p in bundle.patients])
    assert abs(female - config.patient_rates["female"]) < 0.03
    share_o = np.mean([p.blood_type == "O" for p in bundle.patients])
    assert abs(share_o - config.blood_freqs["O"]) < 0.04


def test_population_seed_determinism():
    a = generate_population(GeneratorConfig(n_donors=5, n_patients=10, seed=42))
    b = generate_population(GeneratorConfig(n_donors=5, n_patients=10, seed=42))
    c = generate_population(GeneratorConfig(n_donors=5, n_patients=10, seed=43))
    assert a.donors == b.donors and a.patients == b.patients
    assert a.donors != c.donors


# --- decisions generator --------------------------------------------------------------

def test_decisions_panel_shape(decisions):
    offers = decisions.offers
    assert len(offers) > 0
    assert {str(d) for d, _ in offers.run_slices} == {d.id for d in decisions.donors}
    for _, block in offers.run_slices:
        seq = offers.sequence_numbers[block]
        assert seq.tolist() == list(range(1, len(seq) + 1))
    assert decisions.manifest["kind"] == "decisions"
    assert decisions.manifest["policy"] == "optn"
    assert decisions.manifest["regime"] == "social-learning"


def test_acceptances_close_their_runs(decisions):
    offers = decisions.offers
    for _, block in offers.run_slices:
        codes = offers.final_decisions[block].tolist()
        if "A" in codes:
            assert codes.index("A") == len(codes) - 1


def test_truth_round_trips_through_the_manifest(decisions):
    truth = decisions.truth_params()
    wanted = default_truth()
    assert truth.mu == wanted.mu
    assert truth.alpha == wanted.alpha
    assert truth.gamma == wanted.gamma
    assert np.array_equal(truth.beta, wanted.beta)


def test_population_bundle_carries_its_config_truth(population):
    assert population.truth_params().gamma == default_truth().gamma


def test_bare_bundle_has_no_truth(population):
    bare = DatasetBundle(
        donors=population.donors, patients=population.patients, offers=None, manifest={}
    )
    assert bare.truth_params() is None


def test_untruncated_counterfactual_panel_cannot_be_saved(population, tmp_path):
    loose = generate_decisions(
        population,
        default_truth(),
        PriorityPolicy.OPTN,
        InfoRegime.NO_SOCIAL_LEARNING,
        seed=14,
        run_size=RunSizeLaw(mean=20.0, sd=10.0, lower=1.0, upper=60.0),
        truncate=False,
    )
    accepts = (loose.offers.final_decisions == "A").sum()
    assert accepts > len({str(d) for d, _ in loose.offers.run_slices})
    with pytest.raises(IntegrityError, match="multiple accepted rows"):
        save_bundle(loose, tmp_path / "nope")


# --- disk round trip --------------------------------------------------------------------

def test_save_load_round_trip(decisions, tmp_path):
    path = tmp_path / "bundle"
    save_bundle(decisions, path)
    loaded = load_bundle(path)
    assert loaded.donors == decisions.donors
    assert loaded.patients == decisions.patients
    assert loaded.manifest == decisions.manifest
    fresh, saved = loaded.offers, decisions.offers
    assert np.array_equal(fresh.donor_ids, saved.donor_ids)
    assert np.array_equal(fresh.patient_ids, saved.patient_ids)
    assert np.array_equal(fresh.sequence_numbers, saved.sequence_numbers)
    assert np.array_equal(fresh.provisional_yes, saved.provisional_yes)
    assert np.array_equal(fresh.final_decisions, saved.final_decisions)
    assert np.array_equal(fresh.distance_nm, saved.distance_nm)  # repr survives exactly
    assert np.array_equal(fresh.weight_diff, saved.weight_diff)


def test_save_is_deterministic(decisions, tmp_path):
    save_bundle(decisions, tmp_path / "one")
    save_bundle(decisions, tmp_path / "two")
    for name in ("donors.csv", "patients.csv", "offers.csv", "manifest.txt"):
        a = (tmp_path / "one" / name).read_bytes()
        b = (tmp_path / "two" / name).read_bytes()
        assert a == b, name


def test_population_round_trip_skips_offers(population, tmp_path):
    path = tmp_path / "pop"
    save_bundle(population, path)
    assert not (path / "offers.csv").exists()
    loaded = load_bundle(path)
    assert loaded.offers is None
    assert loaded.donors == population.donors


# --- parse failures ------------------------------------------------------------------------

def _saved(decisions, tmp_path):
    path = tmp_path / "bundle"
    save_bundle(decisions, path)
    return path


def test_load_missing_directory(tmp_path):
    with pytest.raises(ParseError, match="manifest.txt: file not found"):
        load_bundle(tmp_path / "absent")


def test_load_rejects_unknown_schema(decisions, tmp_path):
    path = _saved(decisions, tmp_path)
    manifest = (path / "manifest.txt").read_text().replace(
        "schema_version=1", "schema_version=99"
    )
    (path / "manifest.txt").write_text(manifest)
    with pytest.raises(ParseError, match="schema_version '99' unsupported"):
        load_bundle(path)


def test_load_rejects_malformed_manifest_line(decisions, tmp_path):
    path = _saved(decisions, tmp_path)
    with open(path / "manifest.txt", "a") as handle:
        handle.write("no equals sign here\n")
    with pytest.raises(ParseError, match="expected key=value"):
        load_bundle(path)


def test_load_reports_missing_columns(decisions, tmp_path):
    path = _saved(decisions, tmp_path)
    lines = (path / "patients.csv").read_text().splitlines()
    lines[0] = lines[0].replace("las", "lung_score")
    (path / "patients.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match=r"patients.csv: missing columns \['las'\]"):
        load_bundle(path)


def test_load_reports_bad_cell_with_row_number(decisions, tmp_path):
    path = _saved(decisions, tmp_path)
    lines = (path / "donors.csv").read_text().splitlines()
    first = lines[1].split(",")
    first[1] = "forty"
    lines[1] = ",".join(first)
    (path / "donors.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="donors.csv row 2: bad age"):
        load_bundle(path)


def test_load_reports_bad_decision_code(decisions, tmp_path):
    path = _saved(decisions, tmp_path)
    text = (path / "offers.csv").read_text().splitlines()
    row = text[1].split(",")
    row[4] = "MAYBE"
    text[1] = ",".join(row)
    (path / "offers.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(ParseError, match="offers.csv row 2: final_decision"):
        load_bundle(path)


def test_load_rejects_domain_violations_with_row(decisions, tmp_path):
    path = _saved(decisions, tmp_path)
    lines = (path / "patients.csv").read_text().splitlines()
    cells = lines[3].split(",")
    cells[1] = "-4.0"  # a negative severity score
    lines[3] = ",".join(cells)
    (path / "patients.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="patients.csv row 4"):
        load_bundle(path)


# --- cross-file integrity ---------------------------------------------------------------------

def _with_offers(decisions, **overrides):
    offers = decisions.offers
    cols = {
        "donor_ids": offers.donor_ids.copy(),
        "patient_ids": offers.patient_ids.copy(),
        "sequence_numbers": offers.sequence_numbers.copy(),
        "provisional_yes": offers.provisional_yes.copy(),
        "final_decisions": offers.final_decisions.copy(),
        "blood_match": offers.blood_match.copy(),
        "distance_nm": offers.distance_nm.copy(),
        "age_diff": offers.age_diff.copy(),
        "height_diff": offers.height_diff.copy(),
        "weight_diff": offers.weight_diff.copy(),
    }
    cols.update(overrides)
    return DatasetBundle(
        donors=decisions.donors,
        patients=decisions.patients,
        offers=OffersTable(**cols),
        manifest=decisions.manifest,
    )


def test_validate_catches_unknown_patient(decisions):
    patient_ids = decisions.offers.patient_ids.copy()
    patient_ids[5] = "P-GHOST"
    with pytest.raises(IntegrityError, match="row 7: unknown patient id 'P-GHOST'"):
        validate_bundle(_with_offers(decisions, patient_ids=patient_ids))


def test_validate_catches_unknown_donor(decisions):
    donor_ids = decisions.offers.donor_ids.copy()
    target = donor_ids[0]
    donor_ids[donor_ids == target] = "D-GHOST"
    with pytest.raises(IntegrityError, match="unknown donor id 'D-GHOST'"):
        validate_bundle(_with_offers(decisions, donor_ids=donor_ids))


def test_validate_catches_broken_sequence(decisions):
    seq = decisions.offers.sequence_numbers.copy()
    seq[2] = 99
    with pytest.raises(IntegrityError, match="breaks the 1..n run order"):
        validate_bundle(_with_offers(decisions, sequence_numbers=seq))


def test_validate_catches_decision_provisional_mismatch(decisions):
    flags = decisions.offers.provisional_yes.copy()
    decisions_col = decisions.offers.final_decisions.copy()
    idx = int(np.flatnonzero(flags == 1)[0])
    decisions_col[idx] = "NA"
    with pytest.raises(IntegrityError, match="inconsistent with"):
        validate_bundle(_with_offers(decisions, final_decisions=decisions_col))


def test_validate_catches_split_runs(decisions):
    offers = decisions.offers
    order = np.arange(len(offers))
    run = next(
        block for _, block in offers.run_slices if block.stop - block.start >= 2
    )
    moved = np.concatenate([order[run.start:run.start + 1],
                            order[run.stop:],
                            order[run.start + 1:run.stop],
                            order[:run.start]])
    shuffled = _with_offers(
        decisions,
        **{
            name: getattr(offers, name)[moved]
            for name in (
                "donor_ids", "patient_ids", "sequence_numbers", "provisional_yes",
                "final_decisions", "blood_match", "distance_nm", "age_diff",
                "height_diff", "weight_diff",
            )
        },
    )
    with pytest.raises(IntegrityError):
        validate_bundle(shuffled)


def test_offers_table_rejects_ragged_columns():
    good = OffersTable.empty()
    with pytest.raises(ValueError, match="mismatched length"):
        OffersTable(
            donor_ids=np.array(["D1"], dtype=object),
            patient_ids=np.array([], dtype=object),
            sequence_numbers=np.array([1], dtype=np.int64),
            provisional_yes=np.array([1], dtype=np.int64),
            final_decisions=np.array(["R"], dtype=object),
            blood_match=np.array([2], dtype=np.int64),
            distance_nm=np.array([1.0]),
            age_diff=np.array([0.0]),
            height_diff=np.array([0.0]),
            weight_diff=np.array([0.0]),
        )
    assert len(good) == 0 and good.run_slices == ()
