"""Two-step estimator: transforms, standard errors, and small-sample fits."""

import csv
import math

import numpy as np
import pytest

from matchrun.beliefs import InfoRegime
from matchrun.core import ModelParams
from matchrun.dataio import (
    GeneratorConfig,
    RunSizeLaw,
    default_truth,
    generate_decisions,
    generate_population,
)
from matchrun.estimator import (
    FREE_PARAM_NAMES,
    N_FREE,
    EstimationResult,
    SocialLearningEstimator,
    bhhh_std_errors,
    canonicalize,
    estimate_mu,
    fit,
    format_estimate_report,
    pack_params,
    unpack_params,
    transform_jacobian,
    write_estimate_csv,
)
from matchrun.likelihood import EstimationData, build_estimation_data, total_log_likelihood
from matchrun.policies import PriorityPolicy


@pytest.fixture(scope="module")
def bundle():
    population = generate_population(GeneratorConfig(n_donors=60, n_patients=250, seed=101))
    return generate_decisions(
        population,
        default_truth(),
        PriorityPolicy.OPTN,
        InfoRegime.SOCIAL_LEARNING,
        seed=55,
        run_size=RunSizeLaw(mean=12.0, sd=6.0, lower=1.0, upper=30.0),
    )


@pytest.fixture(scope="module")
def data(bundle):
    return build_estimation_data(bundle)


@pytest.fixture(scope="module")
def mid_bundle():
    """Long enough runs to actually pin down the learning parameters."""
    population = generate_population(GeneratorConfig(n_donors=150, n_patients=400, seed=101))
    return generate_decisions(
        population,
        default_truth(),
        PriorityPolicy.OPTN,
        InfoRegime.SOCIAL_LEARNING,
        seed=55,
        run_size=RunSizeLaw(mean=40.0, sd=20.0, lower=1.0, upper=150.0),
    )


@pytest.fixture(scope="module")
def warm_fit(mid_bundle):
    return fit(mid_bundle, init=default_truth())


# --- parameter transforms ------------------------------------------------------

def test_pack_unpack_round_trip():
    truth = default_truth()
    back = unpack_params(pack_params(truth), truth.mu)
    assert back.alpha == pytest.approx(truth.alpha, rel=1e-12)
    assert back.p == pytest.approx(truth.p, rel=1e-12)
    assert back.gamma == truth.gamma
    assert np.allclose(back.beta, truth.beta, rtol=0, atol=0)


def test_unpack_never_touches_the_endpoints():
    """Far out in the search space the sigmoids round to 0/1; the model
    parameters must stay strictly inside their open intervals anyway."""
    t = np.zeros(N_FREE)
    t[0] = 300.0
    t[1] = -300.0
    params = unpack_params(t, 0.9)
    assert 0.5 < params.alpha < 1.0
    assert 0.0 < params.p < 1.0


def test_unpack_shape_check():
    with pytest.raises(ValueError, match="length"):
        unpack_params(np.zeros(N_FREE - 1), 0.9)


def test_transform_jacobian_matches_finite_differences():
    t = pack_params(default_truth())
    jac = transform_jacobian(t)
    h = 1e-6
    for i, pick in [(0, lambda q: q.alpha), (1, lambda q: q.p), (2, lambda q: q.gamma)]:
        hi, lo = t.copy(), t.copy()
        hi[i] += h
        lo[i] -= h
        fd = (pick(unpack_params(hi, 0.9)) - pick(unpack_params(lo, 0.9))) / (2 * h)
        assert jac[i] == pytest.approx(fd, rel=1e-6)
    assert np.all(jac[3:] == 1.0)


# --- first step ----------------------------------------------------------------

class _FakeOffers:
    def __init__(self, flags):
        self.provisional_yes = np.asarray(flags)

    def __len__(self):
        return len(self.provisional_yes)


def test_mu_is_a_share():
    assert estimate_mu(_FakeOffers([1, 1, 1, 0])) == 0.75
    assert estimate_mu(_FakeOffers([1, 1])) == 1.0


def test_mu_requires_rows():
    with pytest.raises(ValueError, match="no offer rows"):
        estimate_mu(_FakeOffers([]))


def test_mu_agrees_between_table_and_flat_layout(bundle, data):
    direct = float(np.mean(bundle.offers.provisional_yes))
    assert estimate_mu(bundle) == pytest.approx(direct)
    assert estimate_mu(data) == pytest.approx(direct)
    assert abs(direct - default_truth().mu) < 0.03


# --- symmetry ------------------------------------------------------------------

def test_canonicalize_folds_the_sign_of_gamma():
    truth = default_truth()
    mirrored = ModelParams(
        mu=truth.mu, alpha=truth.alpha, p=1.0 - truth.p, gamma=-truth.gamma, beta=truth.beta
    )
    fixed = canonicalize(mirrored)
    assert fixed.gamma == truth.gamma
    assert fixed.p == pytest.approx(truth.p)
    assert canonicalize(truth) is truth


def test_relabeling_the_quality_state_leaves_the_likelihood_alone(data):
    truth = default_truth()
    mirrored = ModelParams(
        mu=truth.mu, alpha=truth.alpha, p=1.0 - truth.p, gamma=-truth.gamma, beta=truth.beta
    )
    assert total_log_likelihood(data, mirrored) == pytest.approx(
        total_log_likelihood(data, truth), rel=1e-12
    )


# --- BHHH ------------------------------------------------------------------------

def test_duplicating_the_sample_shrinks_errors_by_root_two(data):
    params = default_truth()
    single = bhhh_std_errors(data, params)
    twice = EstimationData(
        X=np.vstack([data.X, data.X]),
        indptr=np.concatenate([data.indptr, data.indptr[1:] + data.indptr[-1]]),
        accepted=np.concatenate([data.accepted, data.accepted]),
        donor_ids=data.donor_ids + tuple(f"{d}-copy" for d in data.donor_ids),
        n_offers=2 * data.n_offers,
        n_provisional_yes=2 * data.n_provisional_yes,
    )
    double = bhhh_std_errors(twice, params)
    mask = np.isfinite(single.std_errors) & (single.std_errors > 0)
    assert mask.sum() >= 20
    ratio = double.std_errors[mask] / single.std_errors[mask]
    assert np.allclose(ratio, 1.0 / math.sqrt(2.0), rtol=1e-7)


# --- full fits -------------------------------------------------------------------

def test_fit_recovers_the_neighborhood(warm_fit):
    truth = default_truth()
    assert warm_fit.converged
    assert warm_fit.n_runs == 150
    assert abs(warm_fit.params.mu - truth.mu) < 0.03
    assert abs(warm_fit.params.alpha - truth.alpha) < 0.20
    assert warm_fit.params.alpha > 0.75  # signals come out informative
    assert abs(warm_fit.params.p - truth.p) < 0.30
    assert abs(warm_fit.params.gamma - truth.gamma) < 2.0
    assert math.isfinite(warm_fit.log_likelihood)
    assert warm_fit.params.gamma >= 0.0
    assert warm_fit.mu_std_error == pytest.approx(
        math.sqrt(warm_fit.params.mu * (1 - warm_fit.params.mu) / warm_fit.n_offers),
        rel=1e-6,
    )


def test_named_estimates_align(warm_fit):
    named = warm_fit.named_estimates()
    assert tuple(named) == FREE_PARAM_NAMES
    assert named["alpha"] == warm_fit.params.alpha
    assert named["beta_intercept"] == warm_fit.params.beta[0]


def test_refitting_from_the_optimum_changes_nothing(mid_bundle, warm_fit):
    again = fit(mid_bundle, init=warm_fit.params, restarts=1)
    assert abs(again.log_likelihood - warm_fit.log_likelihood) < 1e-6


def test_cold_start_finds_the_same_basin(mid_bundle, warm_fit):
    cold = fit(mid_bundle, compute_std_errors=False)
    assert cold.converged
    assert abs(cold.log_likelihood - warm_fit.log_likelihood) < 0.5


def test_iteration_cap_reports_not_converged(bundle):
    capped = fit(bundle, max_iters=1, restarts=0, compute_std_errors=False)
    assert not capped.converged
    assert math.isfinite(capped.log_likelihood)
    assert isinstance(capped.params, ModelParams)


# --- sklearn-style facade ---------------------------------------------------------

def test_facade_get_set_params():
    est = SocialLearningEstimator(restarts=3)
    assert est.get_params()["restarts"] == 3
    assert est.set_params(restarts=1, max_iters=10) is est
    assert est.max_iters == 10
    with pytest.raises(ValueError, match="unknown parameter"):
        est.set_params(bogus=1)


def test_facade_exposes_fitted_attributes(bundle):
    est = SocialLearningEstimator(compute_std_errors=False)
    out = est.fit(bundle, init=default_truth())
    assert out is est
    assert est.gamma_ == est.result_.params.gamma
    assert est.alpha_ == est.params_.alpha
    assert est.log_likelihood_ == est.result_.log_likelihood
    assert len(est.beta_) == len(default_truth().beta)


# --- reporting --------------------------------------------------------------------

def test_report_lists_every_parameter(warm_fit):
    text = format_estimate_report(warm_fit)
    assert f"runs: {warm_fit.n_runs}" in text
    assert "mu" in text and "alpha" in text and "beta_pair_distance_nm" in text
    assert "truth" not in text


def test_report_with_truth_shows_deltas(warm_fit):
    text = format_estimate_report(warm_fit, truth=default_truth())
    assert "truth" in text and "delta" in text
    line = next(l for l in text.splitlines() if l.startswith("mu "))
    assert f"{warm_fit.params.mu - default_truth().mu:>14.6f}" in line


def test_report_marks_unusable_errors(warm_fit):
    from dataclasses import replace

    bad = np.array(warm_fit.std_errors, dtype=float)
    bad[0] = float("nan")
    doctored = replace(warm_fit, std_errors=bad, se_flags=("alpha",))
    text = format_estimate_report(doctored)
    assert "no usable standard error for: alpha" in text
    assert "--" in text


def test_estimate_csv_round_trip(tmp_path, warm_fit):
    path = tmp_path / "estimates.csv"
    write_estimate_csv(warm_fit, path)
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [r["parameter"] for r in rows] == ["mu", *FREE_PARAM_NAMES]
    assert float(rows[0]["estimate"]) == warm_fit.params.mu
    by_name = {r["parameter"]: float(r["estimate"]) for r in rows}
    assert by_name["gamma"] == warm_fit.params.gamma
    assert by_name["beta_intercept"] == warm_fit.params.beta[0]
