"""Observed-run likelihood: readable path, batch kernel, and brute-force oracle."""

import math

import numpy as np
import pytest

from matchrun.beliefs import InfoRegime
from matchrun.core import (
    COVARIATE_NAMES,
    ModelParams,
    PairCovariates,
    logistic_cdf,
    utility_index,
)
from matchrun.dataio import (
    GeneratorConfig,
    RunSizeLaw,
    default_truth,
    generate_decisions,
    generate_population,
)
from matchrun.likelihood import (
    EstimationData,
    build_estimation_data,
    donor_log_likelihood,
    donor_log_likelihood_vector,
    enumerate_donor_log_likelihood,
    total_log_likelihood,
)
from matchrun.policies import PriorityPolicy, rank_candidates
from test_core import make_donor, make_patient


def params_with(**kw):
    truth = default_truth()
    base = dict(mu=truth.mu, alpha=truth.alpha, p=truth.p, gamma=truth.gamma, beta=truth.beta)
    base.update(kw)
    return ModelParams(**base)


def ranked(n):
    donor = make_donor()
    candidates = []
    for i in range(n):
        patient = make_patient(
            id=f"P{i}", las=40.0 + 3.0 * i, waiting_time=2.0 + i, location=(3.0 + 2 * i, 4.0)
        )
        candidates.append((patient, PairCovariates.from_profiles(donor, patient)))
    return rank_candidates(PriorityPolicy.OPTN, donor, candidates, default_truth().beta)


def run_indices(match_run, params):
    return [
        utility_index(match_run.donor, e.patient, e.pair, params.beta)
        for e in match_run.entries
    ]


# --- input contracts ---------------------------------------------------------

def test_rejects_more_decisions_than_candidates():
    with pytest.raises(ValueError, match="more decisions"):
        donor_log_likelihood(ranked(1), ["R", "R"], default_truth())


def test_rejects_unknown_decision_codes():
    with pytest.raises(ValueError, match="expected A/R/NA"):
        donor_log_likelihood(ranked(2), ["R", "X"], default_truth())


def test_rejects_non_finite_indices():
    with pytest.raises(ValueError, match="finite"):
        donor_log_likelihood(ranked(1), ["R"], default_truth(), indices=[float("nan")])


def test_estimation_data_shape_checks():
    X = np.zeros((2, len(COVARIATE_NAMES)))
    with pytest.raises(ValueError, match="indptr"):
        EstimationData(X, np.array([0, 1]), np.array([True]), ("D1",), 2, 2)
    with pytest.raises(ValueError, match="one accepted flag"):
        EstimationData(X, np.array([0, 2]), np.array([True, False]), ("D1",), 2, 2)
    bad = X.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        EstimationData(bad, np.array([0, 2]), np.array([True]), ("D1",), 2, 2)


# --- degenerate runs ---------------------------------------------------------

def test_all_na_run_contributes_nothing():
    assert donor_log_likelihood(ranked(3), ["NA", "NA", "NA"], default_truth()) == 0.0


def test_single_accept_with_zero_gamma_is_plain_logit():
    """Without a common value the signal machinery must integrate away."""
    params = params_with(gamma=0.0)
    run = ranked(1)
    idx = run_indices(run, params)[0]
    value = donor_log_likelihood(run, ["A"], params)
    assert value == pytest.approx(math.log(logistic_cdf(idx)), rel=1e-12)


def test_single_reject_with_zero_gamma_is_plain_logit():
    params = params_with(gamma=0.0)
    run = ranked(1)
    idx = run_indices(run, params)[0]
    value = donor_log_likelihood(run, ["R"], params)
    assert value == pytest.approx(math.log(1.0 - logistic_cdf(idx)), rel=1e-12)


def test_rows_after_the_acceptance_are_ignored():
    run = ranked(3)
    short = donor_log_likelihood(run, ["R", "A"], default_truth())
    padded = donor_log_likelihood(run, ["R", "A", "R"], default_truth())
    assert padded == short


def test_na_rows_drop_out():
    params = default_truth()
    idx = [0.4, -0.2]
    with_na = donor_log_likelihood(
        ranked(4), ["NA", "R", "NA", "A"], params, indices=[9.9, 0.4, 9.9, -0.2]
    )
    compact = donor_log_likelihood(ranked(2), ["R", "A"], params, indices=idx)
    assert with_na == pytest.approx(compact, rel=1e-14)


def test_deep_tail_indices_stay_finite():
    value = donor_log_likelihood(
        ranked(2), ["R", "A"], default_truth(), indices=[-800.0, -800.0]
    )
    assert math.isfinite(value)
    assert value < -700


# --- enumeration oracle ------------------------------------------------------

@pytest.mark.parametrize(
    "decisions",
    [
        ["A"],
        ["R"],
        ["R", "A"],
        ["R", "R"],
        ["NA", "A"],
        ["R", "R", "A"],
        ["R", "NA", "R"],
        ["R", "R", "R", "A"],
        ["R", "R", "R", "R"],
        ["NA", "R", "NA", "A"],
    ],
)
def test_recursion_matches_enumeration(decisions):
    run = ranked(len(decisions))
    fast = donor_log_likelihood(run, decisions, default_truth())
    slow = enumerate_donor_log_likelihood(run, decisions, default_truth())
    assert fast == pytest.approx(slow, rel=1e-10)


def test_recursion_matches_enumeration_at_odd_parameters():
    params = params_with(alpha=0.62, p=0.91, gamma=-2.5)
    run = ranked(4)
    for decisions in (["R", "R", "A"], ["R", "R", "R", "R"]):
        fast = donor_log_likelihood(run, decisions, params)
        slow = enumerate_donor_log_likelihood(run, decisions, params)
        assert fast == pytest.approx(slow, rel=1e-10)


# --- dataset assembly and the batch kernel -----------------------------------

@pytest.fixture(scope="module")
def small_bundle():
    population = generate_population(GeneratorConfig(n_donors=12, n_patients=120, seed=31))
    return generate_decisions(
        population,
        default_truth(),
        PriorityPolicy.OPTN,
        InfoRegime.SOCIAL_LEARNING,
        seed=77,
        run_size=RunSizeLaw(mean=8.0, sd=4.0, lower=1.0, upper=20.0),
    )


def test_build_estimation_data_counts(small_bundle):
    data = build_estimation_data(small_bundle)
    offers = small_bundle.offers
    assert data.n_offers == len(offers)
    assert data.n_provisional_yes == int(offers.provisional_yes.sum())
    assert len(data.X) == data.n_provisional_yes
    assert data.n_runs == len(set(offers.donor_ids.tolist()))
    accepted_ids = {
        str(d) for d, dec in zip(offers.donor_ids, offers.final_decisions) if dec == "A"
    }
    flagged = {d for d, a in zip(data.donor_ids, data.accepted) if a}
    assert flagged == accepted_ids


def test_build_estimation_data_requires_offers(small_bundle):
    from matchrun.dataio import DatasetBundle

    empty = DatasetBundle(
        donors=small_bundle.donors,
        patients=small_bundle.patients,
        offers=None,
        manifest={},
    )
    with pytest.raises(ValueError, match="no offer rows"):
        build_estimation_data(empty)


def test_batch_kernel_equals_readable_path(small_bundle):
    """The compiled batch sweep and the per-donor function share the math."""
    data = build_estimation_data(small_bundle)
    params = params_with(alpha=0.8, p=0.45, gamma=2.2)
    eta = data.X @ params.beta
    batch = donor_log_likelihood_vector(data, params)
    for d in range(data.n_runs):
        lo, hi = data.indptr[d], data.indptr[d + 1]
        decisions = ["R"] * (hi - lo)
        if data.accepted[d]:
            decisions[-1] = "A"
        single = donor_log_likelihood(
            ranked(hi - lo), decisions, params, indices=eta[lo:hi]
        )
        assert batch[d] == pytest.approx(single, rel=1e-12, abs=1e-12)
    assert total_log_likelihood(data, params) == pytest.approx(batch.sum())


def test_zero_gamma_total_is_a_truncated_logit(small_bundle):
    data = build_estimation_data(small_bundle)
    params = params_with(gamma=0.0)
    eta = data.X @ params.beta
    expected = 0.0
    for d in range(data.n_runs):
        lo, hi = data.indptr[d], data.indptr[d + 1]
        stop = hi - 1 if data.accepted[d] else hi
        expected += np.log(1.0 - logistic_cdf(eta[lo:stop])).sum()
        if data.accepted[d]:
            expected += math.log(logistic_cdf(eta[hi - 1]))
    assert total_log_likelihood(data, params) == pytest.approx(expected, rel=1e-12)


# --- Monte Carlo cross-check ---------------------------------------------------

def test_pattern_probabilities_match_simulation_frequencies():
    """Likelihood of each two-patient decision pattern vs. a vectorized
    linear-space simulation of the generative story (everyone provisional-yes).
    """
    params = params_with(mu=0.9999999, alpha=0.8, p=0.4, gamma=2.0)
    idx = [0.3, -0.4]
    n = 1_000_000
    rng = np.random.default_rng(2024)

    theta = np.where(rng.random(n) < params.p, 1, -1)
    sig1 = np.where(rng.random(n) < params.alpha, theta, -theta)
    sig2 = np.where(rng.random(n) < params.alpha, theta, -theta)

    def posterior(prior_high, signal):
        like = np.where(signal == 1, params.alpha, 1.0 - params.alpha)
        unlike = np.where(signal == 1, 1.0 - params.alpha, params.alpha)
        q = prior_high * like / (prior_high * like + (1.0 - prior_high) * unlike)
        return 2.0 * q - 1.0

    accept1 = rng.random(n) < logistic_cdf(idx[0] + params.gamma * posterior(params.p, sig1))

    # The second patient sees the rejection, not the signal behind it, so the
    # update works through the average rejection chance per quality state.
    reject_given = {
        q: sum(
            (params.alpha if s == q else 1.0 - params.alpha)
            * (1.0 - logistic_cdf(idx[0] + params.gamma * posterior(params.p, np.array([s]))[0]))
            for s in (1, -1)
        )
        for q in (1, -1)
    }
    tilted = params.p * reject_given[1] / (
        params.p * reject_given[1] + (1.0 - params.p) * reject_given[-1]
    )
    accept2 = rng.random(n) < logistic_cdf(idx[1] + params.gamma * posterior(tilted, sig2))

    freq = {
        "A": np.mean(accept1),
        "RA": np.mean(~accept1 & accept2),
        "RR": np.mean(~accept1 & ~accept2),
    }
    run = ranked(2)
    model = {
        "A": math.exp(donor_log_likelihood(run, ["A"], params, indices=idx)),
        "RA": math.exp(donor_log_likelihood(run, ["R", "A"], params, indices=idx)),
        "RR": math.exp(donor_log_likelihood(run, ["R", "R"], params, indices=idx)),
    }
    assert sum(model.values()) == pytest.approx(1.0, abs=1e-12)
    for pattern, value in model.items():
        se = math.sqrt(value * (1.0 - value) / n)
        assert abs(freq[pattern] - value) < 5.0 * se, (pattern, freq[pattern], value)
