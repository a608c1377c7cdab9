"""Reduced-form regressions over offer rows.

Two fitting routines — least squares and a logit via iteratively reweighted
least squares — with heteroskedasticity-robust standard errors, plus the
design-matrix builder that joins offers to profiles, adds distance-zone
dummies (zone A is the reference), and applies the per-regression sample
rules.  Columns with no variation in the chosen sample are dropped up front
and reported, since small or geographically concentrated datasets routinely
produce empty zones; genuine collinearity among varying columns stays a hard
error that names the offending columns.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import COVARIATE_NAMES, PairCovariates, covariate_row, zone_from_distance

__all__ = [
    "RankDeficiencyError",
    "SeparationError",
    "RegressionSpec",
    "RegressionResult",
    "RobustOLS",
    "RobustLogit",
    "ZONE_DUMMIES",
    "sequence_number_spec",
    "provisional_yes_spec",
    "final_yes_spec",
    "build_design",
    "fit_linear",
    "fit_logit",
    "write_regression_csv",
]

ZONE_DUMMIES = ("zone_B", "zone_C", "zone_D", "zone_E")

_OUTCOMES = ("sequence_number", "provisional_yes", "final_yes")
_SAMPLES = ("all", "provisional_yes")


class RankDeficiencyError(ValueError):
    """The design matrix is collinear; the message names the columns."""


class SeparationError(RuntimeError):
    """Logit coefficients diverged: the outcome is (quasi-)separated."""


@dataclass(frozen=True)
class RegressionSpec:
    outcome: str
    regressors: tuple[str, ...]
    family: str  # "linear" | "logit"
    sample: str = "all"
    # Final-acceptance regressions renumber positions among the
    # provisional-yes patients of each run before fitting.
    reorder_sequence: bool = False

    def __post_init__(self) -> None:
        if self.outcome not in _OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}; expected one of {_OUTCOMES}")
        if self.family not in ("linear", "logit"):
            raise ValueError(f"family must be linear or logit, got {self.family!r}")
        if self.sample not in _SAMPLES:
            raise ValueError(f"unknown sample rule {self.sample!r}; expected one of {_SAMPLES}")
        allowed = set(COVARIATE_NAMES) | set(ZONE_DUMMIES) | {"sequence_number"}
        unknown = [r for r in self.regressors if r not in allowed]
        if unknown:
            raise ValueError(f"unknown regressors {unknown}")
        if len(set(self.regressors)) != len(self.regressors):
            raise ValueError("duplicate regressor names")
        if self.outcome in self.regressors:
            raise ValueError(f"outcome {self.outcome!r} cannot also be a regressor")


def _controls(with_sequence: bool) -> tuple[str, ...]:
    names = list(COVARIATE_NAMES)
    if with_sequence:
        names.insert(1, "sequence_number")
    return tuple(names) + ZONE_DUMMIES


def sequence_number_spec() -> RegressionSpec:
    """Linear model: which offers land early vs late in the queue."""
    return RegressionSpec(
        outcome="sequence_number",
        regressors=_controls(with_sequence=False),
        family="linear",
        sample="all",
    )


def provisional_yes_spec() -> RegressionSpec:
    """Logit of the provisional response on position and all controls."""
    return RegressionSpec(
        outcome="provisional_yes",
        regressors=_controls(with_sequence=True),
        family="logit",
        sample="all",
    )


def final_yes_spec() -> RegressionSpec:
    """Logit of final acceptance on position among provisional-yes patients."""
    return RegressionSpec(
        outcome="final_yes",
        regressors=_controls(with_sequence=True),
        family="logit",
        sample="provisional_yes",
        reorder_sequence=True,
    )


def build_design(bundle, spec: RegressionSpec):
    """(y, X, kept_names, dropped_names) for one spec on one dataset.

    Constant columns (other than the intercept) are removed before fitting;
    they are reported so output tables can show them as absent rather than
    silently renumbering rows.
    """
    offers = bundle.offers
    if offers is None or len(offers) == 0:
        raise ValueError("dataset has no offer rows to regress on")

    keep = np.ones(len(offers), dtype=bool)
    if spec.sample == "provisional_yes":
        keep = offers.provisional_yes.astype(bool)
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise ValueError(f"sample rule {spec.sample!r} leaves no rows")

    sequence = offers.sequence_numbers.astype(float)
    if spec.reorder_sequence:
        sequence = sequence.copy()
        for _, block in offers.run_slices:
            sub = np.arange(block.start, block.stop)
            sub = sub[keep[sub]]
            sequence[sub] = np.arange(1, sub.size + 1, dtype=float)

    if spec.outcome == "sequence_number":
        y = sequence[rows]
    elif spec.outcome == "provisional_yes":
        y = offers.provisional_yes[rows].astype(float)
    else:
        y = (offers.final_decisions[rows] == "A").astype(float)

    registry: dict[str, np.ndarray] = {}
    base = np.empty((rows.size, len(COVARIATE_NAMES)))
    for out_i, i in enumerate(rows):
        donor = bundle.donor_by_id[str(offers.donor_ids[i])]
        patient = bundle.patient_by_id[str(offers.patient_ids[i])]
        pair = PairCovariates(
            primary_blood_match=int(offers.blood_match[i]),
            distance_nm=float(offers.distance_nm[i]),
            age_diff=float(offers.age_diff[i]),
            height_diff=float(offers.height_diff[i]),
            weight_diff=float(offers.weight_diff[i]),
        )
        base[out_i] = covariate_row(donor, patient, pair)
    for j, name in enumerate(COVARIATE_NAMES):
        registry[name] = base[:, j]
    registry["sequence_number"] = sequence[rows]
    zones = np.array(
        [zone_from_distance(float(offers.distance_nm[i])) for i in rows]
    )
    for name in ZONE_DUMMIES:
        registry[name] = (zones == name[-1]).astype(float)

    kept, dropped, columns = [], [], []
    for name in spec.regressors:
        col = registry[name]
        if name != "intercept" and np.ptp(col) == 0.0:
            dropped.append(name)
            continue
        kept.append(name)
        columns.append(col)
    X = np.column_stack(columns)
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise ValueError("design matrix contains non-finite values")
    return y, X, tuple(kept), tuple(dropped)


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    """Raise RankDeficiencyError naming any column inside the others' span."""
    q_basis: list[np.ndarray] = []
    offenders = []
    for j in range(X.shape[1]):
        col = X[:, j]
        scale = np.linalg.norm(col)
        if scale == 0.0:
            offenders.append(names[j])
            continue
        resid = col.astype(float)
        for q in q_basis:
            resid = resid - (q @ resid) * q
        if np.linalg.norm(resid) < 1e-8 * scale:
            offenders.append(names[j])
        else:
            q_basis.append(resid / np.linalg.norm(resid))
    if offenders:
        raise RankDeficiencyError(
            f"collinear columns: {offenders}; drop or merge them before fitting"
        )


@dataclass(frozen=True)
class RegressionResult:
    spec: RegressionSpec
    names: tuple[str, ...]
    estimates: np.ndarray
    std_errors: np.ndarray
    r_squared: float
    n_obs: int
    dropped: tuple[str, ...] = ()
    converged: bool = True

    def coef(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def std_error(self, name: str) -> float:
        return float(self.std_errors[self.names.index(name)])

    def t_stat(self, name: str) -> float:
        return self.coef(name) / self.std_error(name)


class RobustOLS:
    """Least squares with HC1 sandwich errors, sklearn-style interface."""

    def fit(self, X, y, names: Sequence[str] | None = None) -> "RobustOLS":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n, k = X.shape
        names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
        _check_rank(X, names)
        q, r = np.linalg.qr(X)
        beta = np.linalg.solve(r, q.T @ y)
        resid = y - X @ beta
        rinv = np.linalg.solve(r, np.eye(k))
        bread = rinv @ rinv.T  # (X'X)^{-1}
        meat = (X * resid[:, None] ** 2).T @ X
        dof = n / (n - k) if n > k else float("nan")
        cov = dof * bread @ meat @ bread
        sst = float(((y - y.mean()) ** 2).sum())
        ssr = float((resid**2).sum())
        self.coef_ = beta
        self.cov_ = cov
        self.std_errors_ = np.sqrt(np.diag(cov))
        self.residuals_ = resid
        self.r_squared_ = 1.0 - ssr / sst if sst > 0 else float("nan")
        self.n_obs_ = n
        return self

    def get_params(self, deep: bool = True) -> dict:
        return {}

    def set_params(self, **params) -> "RobustOLS":
        if params:
            raise ValueError(f"unknown parameters {sorted(params)}")
        return self


class RobustLogit:
    """Binary logit by iteratively reweighted least squares.

    Sandwich (outer-product) standard errors, McFadden pseudo R-squared.
    Divergence past ±30 — measured per standard deviation of the regressor,
    so the rule is invariant to units, with the intercept judged by the
    fitted index at the covariate means — is treated as separation and
    raised, since the likelihood is flat there and the "estimates" would be
    arbitrary.
    """

    def __init__(self, tol: float = 1e-10, max_iter: int = 100, separation_bound: float = 30.0):
        self.tol = tol
        self.max_iter = max_iter
        self.separation_bound = separation_bound

    def get_params(self, deep: bool = True) -> dict:
        return {
            "tol": self.tol,
            "max_iter": self.max_iter,
            "separation_bound": self.separation_bound,
        }

    def set_params(self, **params) -> "RobustLogit":
        for key, value in params.items():
            if key not in self.get_params():
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, X, y, names: Sequence[str] | None = None) -> "RobustLogit":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("logit outcome must be binary 0/1")
        n, k = X.shape
        names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
        _check_rank(X, names)

        def loglik(b: np.ndarray) -> float:
            eta = X @ b
            # log(1 + e^eta) - y*eta, computed stably on both tails
            return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

        col_means = X.mean(axis=0)
        col_sds = X.std(axis=0)

        def diverged(b: np.ndarray) -> bool:
            per_sd = float(np.max(np.abs(b) * col_sds))
            at_means = abs(float(b @ col_means))
            return max(per_sd, at_means) > self.separation_bound

        beta = np.zeros(k)
        ll = loglik(beta)
        converged = False
        for _ in range(self.max_iter):
            eta = X @ beta
            mu = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
            w = np.maximum(mu * (1.0 - mu), 1e-10)
            z = eta + (y - mu) / w
            sw = np.sqrt(w)
            q, r = np.linalg.qr(X * sw[:, None])
            proposal = np.linalg.solve(r, q.T @ (z * sw))
            # Raw reweighted steps overshoot badly on rare-event data; halve
            # until the likelihood stops getting worse, like glm.fit does.
            direction = proposal - beta
            scale = 1.0
            new_beta, new_ll = proposal, loglik(proposal)
            for _ in range(30):
                if new_ll >= ll - 1e-12:
                    break
                scale *= 0.5
                new_beta = beta + scale * direction
                new_ll = loglik(new_beta)
            step = float(np.max(np.abs(new_beta - beta)))
            beta, ll = new_beta, new_ll
            if diverged(beta):
                raise SeparationError(
                    "coefficients diverged past "
                    f"{self.separation_bound} per regressor standard deviation; "
                    "the outcome is separable in these regressors"
                )
            if step < self.tol:
                converged = True
                break

        eta = X @ beta
        mu = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        sw = np.sqrt(w)
        q, r = np.linalg.qr(X * sw[:, None])
        rinv = np.linalg.solve(r, np.eye(k))
        bread = rinv @ rinv.T  # (X'WX)^{-1}
        score_rows = X * (y - mu)[:, None]
        meat = score_rows.T @ score_rows
        self.cov_ = bread @ meat @ bread
        self.coef_ = beta
        self.std_errors_ = np.sqrt(np.diag(self.cov_))
        self.converged_ = converged
        self.score_ = score_rows.sum(axis=0)
        self.n_obs_ = n
        ll = float(np.sum(y * np.log(np.clip(mu, 1e-300, None))
                          + (1.0 - y) * np.log(np.clip(1.0 - mu, 1e-300, None))))
        share = y.mean()
        if 0.0 < share < 1.0:
            ll_null = n * (share * math.log(share) + (1.0 - share) * math.log(1.0 - share))
            self.pseudo_r_squared_ = 1.0 - ll / ll_null
        else:
            self.pseudo_r_squared_ = float("nan")
        self.log_likelihood_ = ll
        return self


def fit_linear(spec: RegressionSpec, bundle) -> RegressionResult:
    if spec.family != "linear":
        raise ValueError(f"spec family is {spec.family!r}, not linear")
    y, X, names, dropped = build_design(bundle, spec)
    model = RobustOLS().fit(X, y, names)
    return RegressionResult(
        spec=spec,
        names=names,
        estimates=model.coef_,
        std_errors=model.std_errors_,
        r_squared=model.r_squared_,
        n_obs=model.n_obs_,
        dropped=dropped,
    )


def _drop_perfect_dummies(y, X, names):
    """Remove 0/1 regressors whose "on" rows all share one outcome.

    Such a dummy has no finite maximum-likelihood coefficient (the fit walks
    it off to infinity), so it is excluded the way stats packages exclude
    perfect predictors.  The rows stay; only the column goes.
    """
    keep, culled = [], []
    for j, name in enumerate(names):
        col = X[:, j]
        is_dummy = name != "intercept" and np.isin(col, (0.0, 1.0)).all()
        if is_dummy and np.ptp(y[col == 1.0]) == 0.0:
            culled.append(name)
        else:
            keep.append(j)
    if not culled:
        return X, names, ()
    return X[:, keep], tuple(names[j] for j in keep), tuple(culled)


def fit_logit(spec: RegressionSpec, bundle) -> RegressionResult:
    if spec.family != "logit":
        raise ValueError(f"spec family is {spec.family!r}, not logit")
    y, X, names, dropped = build_design(bundle, spec)
    X, names, separated = _drop_perfect_dummies(y, X, names)
    dropped = dropped + separated
    model = RobustLogit().fit(X, y, names)
    return RegressionResult(
        spec=spec,
        names=names,
        estimates=model.coef_,
        std_errors=model.std_errors_,
        r_squared=model.pseudo_r_squared_,
        n_obs=model.n_obs_,
        dropped=dropped,
        converged=model.converged_,
    )


def write_regression_csv(
    results: Iterable[tuple[str, RegressionResult]], path
) -> None:
    """Side-by-side coefficient table, one (estimate, std error) pair per fit."""
    results = list(results)
    order: list[str] = []
    for _, res in results:
        for name in res.names + res.dropped:
            if name not in order:
                order.append(name)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        header = ["term"]
        for label, _ in results:
            header += [f"{label} estimate", f"{label} std error"]
        writer.writerow(header)
        for name in order:
            row = [name]
            for _, res in results:
                if name in res.names:
                    row += [repr(res.coef(name)), repr(res.std_error(name))]
                else:
                    row += ["", ""]
            writer.writerow(row)
        footer = ["r_squared"]
        for _, res in results:
            footer += [repr(float(res.r_squared)), ""]
        writer.writerow(footer)
        counts = ["n_obs"]
        for _, res in results:
            counts += [str(res.n_obs), ""]
        writer.writerow(counts)
