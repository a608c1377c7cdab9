"""Two-step maximum likelihood for the acceptance model.

Step one counts the provisional-yes share.  Step two maximizes the
marginalized run likelihood over the remaining free parameters with a
derivative-free simplex search, in an unconstrained space where the signal
precision maps to (0.5, 1) and the prior to (0, 1).  Standard errors come
from the outer product of per-run score vectors (obtained by central finite
differences), pushed back to natural units by the delta method.

The model cannot tell a world with prior p and social pull gamma from one
with prior 1-p and pull -gamma: flipping the quality labels yields the same
run distribution.  Fits are therefore reported in the canonical half where
gamma is non-negative.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import COVARIATE_NAMES, ModelParams
from .econometrics import RankDeficiencyError, RobustLogit, SeparationError
from .likelihood import EstimationData, build_estimation_data, donor_log_likelihood_vector
from .optimize import nelder_mead

__all__ = [
    "FREE_PARAM_NAMES",
    "N_FREE",
    "pack_params",
    "unpack_params",
    "transform_jacobian",
    "estimate_mu",
    "BhhhResult",
    "bhhh_std_errors",
    "EstimationResult",
    "fit",
    "SocialLearningEstimator",
    "format_estimate_report",
    "write_estimate_csv",
]

logger = logging.getLogger(__name__)

FREE_PARAM_NAMES: tuple[str, ...] = ("alpha", "p", "gamma") + tuple(
    f"beta_{name}" for name in COVARIATE_NAMES
)
N_FREE = len(FREE_PARAM_NAMES)

_BOUNDARY_MARGIN = 1e-3


def _logit(x: float) -> float:
    return math.log(x) - math.log1p(-x)


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def pack_params(params: ModelParams) -> np.ndarray:
    """Natural parameters -> unconstrained optimizer vector (length 22)."""
    t = np.empty(N_FREE)
    t[0] = _logit((params.alpha - 0.5) / 0.5)
    t[1] = _logit(params.p)
    t[2] = params.gamma
    t[3:] = params.beta
    return t


_OPEN_EPS = 1e-12


def unpack_params(t: np.ndarray, mu: float) -> ModelParams:
    """Optimizer vector -> natural parameters; mu rides along unchanged.

    The logistic transforms are pinched away from their endpoints by 1e-12:
    past |t| ~ 37 the sigmoid rounds to exactly 0 or 1 in floats, and the
    search must stay inside the open intervals the model requires.  Out
    there the objective is flat to machine precision anyway.
    """
    t = np.asarray(t, dtype=float)
    if t.shape != (N_FREE,):
        raise ValueError(f"expected vector of length {N_FREE}, got shape {t.shape}")
    squeeze = lambda s: min(max(s, _OPEN_EPS), 1.0 - _OPEN_EPS)  # noqa: E731
    return ModelParams(
        mu=mu,
        alpha=0.5 + 0.5 * squeeze(_sigmoid(float(t[0]))),
        p=squeeze(_sigmoid(float(t[1]))),
        gamma=float(t[2]),
        beta=np.array(t[3:]),
    )


def transform_jacobian(t: np.ndarray) -> np.ndarray:
    """Diagonal of d(natural)/d(unconstrained) at t, for the delta method."""
    jac = np.ones(N_FREE)
    s0 = _sigmoid(float(t[0]))
    s1 = _sigmoid(float(t[1]))
    jac[0] = 0.5 * s0 * (1.0 - s0)
    jac[1] = s1 * (1.0 - s1)
    return jac


def estimate_mu(dataset) -> float:
    """Share of offers answered provisionally yes."""
    if isinstance(dataset, EstimationData):
        return dataset.n_provisional_yes / dataset.n_offers
    offers = getattr(dataset, "offers", dataset)
    if offers is None or len(offers) == 0:
        raise ValueError("no offer rows: cannot estimate the provisional-yes share")
    return float(np.mean(offers.provisional_yes))


def _as_estimation_data(dataset) -> EstimationData:
    if isinstance(dataset, EstimationData):
        return dataset
    return build_estimation_data(dataset)


def _warm_start_beta(data: EstimationData) -> np.ndarray:
    """Plain logit of final acceptance on the covariates, ignoring beliefs.

    With gamma forced to zero the model is exactly this logit, so its
    coefficients put the simplex search in the right neighborhood.  Any
    failure (separation, collinearity in a tiny dataset) falls back to zeros.
    """
    y = np.zeros(data.X.shape[0])
    accepted_runs = np.flatnonzero(data.accepted)
    y[data.indptr[accepted_runs + 1] - 1] = 1.0
    try:
        model = RobustLogit().fit(data.X, y, COVARIATE_NAMES)
    except (SeparationError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        logger.warning("warm-start logit failed (%s); starting from zero", exc)
        return np.zeros(len(COVARIATE_NAMES))
    return np.asarray(model.coef_)


class _SearchSpace:
    """Covariate standardization for the simplex search only.

    Raw covariates mix scales from ~0.1 (indicators) to ~400 (P/F ratio), so
    a simplex over raw slopes crawls along ill-conditioned ridges.  Searching
    in per-standard-deviation units — the model is unchanged, only the
    coordinates — conditions the geometry; results map back to raw units
    before anything is reported, and standard errors are computed in the raw
    (reported) parameterization.
    """

    def __init__(self, data: EstimationData):
        mean = data.X.mean(axis=0)
        sd = data.X.std(axis=0)
        sd[sd == 0.0] = 1.0
        mean[0], sd[0] = 0.0, 1.0  # leave the constant column alone
        self.mean, self.sd = mean, sd
        self.data = EstimationData(
            X=(data.X - mean) / sd,
            indptr=data.indptr,
            accepted=data.accepted,
            donor_ids=data.donor_ids,
            n_offers=data.n_offers,
            n_provisional_yes=data.n_provisional_yes,
        )

    def beta_to_search(self, beta: np.ndarray) -> np.ndarray:
        out = beta * self.sd
        out[0] = beta[0] + float(beta @ self.mean)
        return out

    def beta_from_search(self, beta_std: np.ndarray) -> np.ndarray:
        out = beta_std / self.sd
        out[0] = beta_std[0] - float((beta_std[1:] / self.sd[1:]) @ self.mean[1:])
        return out

    def pack(self, params: ModelParams) -> np.ndarray:
        t = pack_params(params)
        t[3:] = self.beta_to_search(t[3:])
        return t

    def unpack(self, t: np.ndarray, mu: float) -> ModelParams:
        params = unpack_params(t, mu)
        return replace(params, beta=self.beta_from_search(params.beta))


@dataclass(frozen=True)
class BhhhResult:
    std_errors: np.ndarray  # natural units, aligned with FREE_PARAM_NAMES
    flagged: tuple[str, ...]  # coordinates whose curvature was not invertible
    score_norm: float
    cov_unconstrained: np.ndarray


def _score_matrix(data: EstimationData, t: np.ndarray, mu: float) -> np.ndarray:
    scores = np.empty((data.n_runs, N_FREE))
    for i in range(N_FREE):
        h = max(1e-5 * abs(float(t[i])), 1e-7)
        lo, hi = t.copy(), t.copy()
        lo[i] -= h
        hi[i] += h
        f_hi = donor_log_likelihood_vector(data, unpack_params(hi, mu))
        f_lo = donor_log_likelihood_vector(data, unpack_params(lo, mu))
        scores[:, i] = (f_hi - f_lo) / (2.0 * h)
    return scores


def bhhh_std_errors(dataset, params: ModelParams) -> BhhhResult:
    """Outer-product-of-scores standard errors at the given parameters.

    Works in the unconstrained space (where the optimizer ran) and maps the
    square roots back through the transform derivatives.  Directions in
    which the score outer product is numerically singular get NaN standard
    errors and are reported by name instead of silently inflating.
    """
    data = _as_estimation_data(dataset)
    t = pack_params(params)
    scores = _score_matrix(data, t, params.mu)
    score_norm = float(np.linalg.norm(scores.sum(axis=0)))
    info = scores.T @ scores

    eigvals, eigvecs = np.linalg.eigh(info)
    cutoff = max(eigvals.max(), 0.0) * 1e-12
    good = eigvals > cutoff
    inv_eig = np.where(good, 1.0 / np.where(good, eigvals, 1.0), 0.0)
    cov = (eigvecs * inv_eig) @ eigvecs.T

    se_unconstrained = np.sqrt(np.maximum(np.diag(cov), 0.0))
    flagged: list[str] = []
    if not good.all():
        null_mass = (eigvecs[:, ~good] ** 2).sum(axis=1)
        for i in np.flatnonzero(null_mass > 1e-8):
            flagged.append(FREE_PARAM_NAMES[i])
            se_unconstrained[i] = float("nan")
    std_errors = np.abs(transform_jacobian(t)) * se_unconstrained
    return BhhhResult(
        std_errors=std_errors,
        flagged=tuple(flagged),
        score_norm=score_norm,
        cov_unconstrained=cov,
    )


@dataclass(frozen=True)
class EstimationResult:
    params: ModelParams
    mu_std_error: float
    log_likelihood: float
    std_errors: np.ndarray  # aligned with FREE_PARAM_NAMES
    converged: bool
    iterations: int
    n_evals: int
    n_runs: int
    n_offers: int
    boundary: dict[str, bool]
    se_flags: tuple[str, ...]
    restarts: int

    def named_estimates(self) -> dict[str, float]:
        values = [self.params.alpha, self.params.p, self.params.gamma, *self.params.beta]
        return dict(zip(FREE_PARAM_NAMES, values))


def _boundary_flags(params: ModelParams) -> dict[str, bool]:
    return {
        "alpha_near_half": params.alpha - 0.5 < _BOUNDARY_MARGIN,
        "alpha_near_one": 1.0 - params.alpha < _BOUNDARY_MARGIN,
        "p_near_zero": params.p < _BOUNDARY_MARGIN,
        "p_near_one": 1.0 - params.p < _BOUNDARY_MARGIN,
    }


def canonicalize(params: ModelParams) -> ModelParams:
    """Fold the quality-relabeling symmetry into gamma >= 0."""
    if params.gamma >= 0.0:
        return params
    return replace(params, p=1.0 - params.p, gamma=-params.gamma)


def fit(
    dataset,
    init: ModelParams | None = None,
    *,
    max_iters: int | None = None,
    restarts: int = 5,
    f_spread_tol: float = 1e-8,
    compute_std_errors: bool = True,
) -> EstimationResult:
    """Full two-step fit on a decisions dataset.

    ``init`` overrides the default starting point (warm-start logit slopes,
    signal precision 0.75, even prior, unit social pull).  The simplex search
    is restarted from its own optimum until an extra pass stops improving,
    which guards against the flat ridges this likelihood develops when the
    prior drifts toward a boundary.
    """
    data = _as_estimation_data(dataset)
    mu = estimate_mu(data)
    mu_se = math.sqrt(max(mu * (1.0 - mu), 0.0) / data.n_offers)
    if not 0.0 < mu < 1.0:
        logger.warning(
            "provisional-yes share is at the boundary (%g); clamping for the likelihood", mu,
        )
        mu = min(max(mu, 1e-9), 1.0 - 1e-9)

    n_accepted = int(data.accepted.sum())
    if n_accepted == 0 or n_accepted == data.n_runs:
        logger.warning(
            "all runs end the same way (%d of %d accepted); expect weak identification",
            n_accepted,
            data.n_runs,
        )

    space = _SearchSpace(data)
    n_evals = 0

    def objective(t: np.ndarray) -> float:
        nonlocal n_evals
        n_evals += 1
        return -float(donor_log_likelihood_vector(space.data, unpack_params(t, mu)).sum())

    if init is not None:
        t0 = space.pack(init)
    else:
        t0 = space.pack(
            ModelParams(mu=mu, alpha=0.75, p=0.5, gamma=1.0, beta=_warm_start_beta(data))
        )
        # Cheap low-dimensional pass: settle the three structural parameters
        # against the warm-start slopes before releasing all coordinates.  The
        # intercept has to move with them — social pull shifts the average
        # acceptance level, and pinning the level forces the pass onto the
        # no-learning ridge.
        frozen = t0.copy()

        def head_objective(head: np.ndarray) -> float:
            t = frozen.copy()
            t[:4] = head
            return objective(t)

        head = nelder_mead(
            head_objective, t0[:4], f_spread_tol=f_spread_tol, max_iters=max_iters
        )
        t0[:4] = head.x

    best = nelder_mead(objective, t0, f_spread_tol=f_spread_tol, max_iters=max_iters)
    iterations = best.iterations
    converged = best.converged
    n_restarts = 0
    for _ in range(restarts):
        again = nelder_mead(objective, best.x, f_spread_tol=f_spread_tol, max_iters=max_iters)
        iterations += again.iterations
        n_restarts += 1
        improvement = best.fun - again.fun
        if again.fun < best.fun:
            best = again
        converged = again.converged
        if again.converged and improvement < 1e-9:
            break

    params = canonicalize(space.unpack(best.x, mu))
    log_likelihood = float(donor_log_likelihood_vector(data, params).sum())

    if compute_std_errors:
        curvature = bhhh_std_errors(data, params)
        std_errors = curvature.std_errors
        se_flags = curvature.flagged
    else:
        std_errors = np.full(N_FREE, float("nan"))
        se_flags = ()

    if not converged:
        logger.warning(
            "simplex search stopped at the iteration cap (%d evals); estimates are best-effort",
            n_evals,
        )
    return EstimationResult(
        params=params,
        mu_std_error=mu_se,
        log_likelihood=log_likelihood,
        std_errors=std_errors,
        converged=converged,
        iterations=iterations,
        n_evals=n_evals,
        n_runs=data.n_runs,
        n_offers=data.n_offers,
        boundary=_boundary_flags(params),
        se_flags=se_flags,
        restarts=n_restarts,
    )


class SocialLearningEstimator:
    """sklearn-style facade over :func:`fit`.

    >>> est = SocialLearningEstimator().fit(bundle)   # doctest: +SKIP
    >>> est.gamma_, est.result_.converged             # doctest: +SKIP
    """

    def __init__(
        self,
        max_iters: int | None = None,
        restarts: int = 5,
        f_spread_tol: float = 1e-8,
        compute_std_errors: bool = True,
    ):
        self.max_iters = max_iters
        self.restarts = restarts
        self.f_spread_tol = f_spread_tol
        self.compute_std_errors = compute_std_errors

    def get_params(self, deep: bool = True) -> dict:
        return {
            "max_iters": self.max_iters,
            "restarts": self.restarts,
            "f_spread_tol": self.f_spread_tol,
            "compute_std_errors": self.compute_std_errors,
        }

    def set_params(self, **params) -> "SocialLearningEstimator":
        known = self.get_params()
        for key, value in params.items():
            if key not in known:
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, dataset, init: ModelParams | None = None) -> "SocialLearningEstimator":
        result = fit(
            dataset,
            init,
            max_iters=self.max_iters,
            restarts=self.restarts,
            f_spread_tol=self.f_spread_tol,
            compute_std_errors=self.compute_std_errors,
        )
        self.result_ = result
        self.params_ = result.params
        self.mu_ = result.params.mu
        self.alpha_ = result.params.alpha
        self.p_ = result.params.p
        self.gamma_ = result.params.gamma
        self.beta_ = result.params.beta
        self.std_errors_ = result.std_errors
        self.log_likelihood_ = result.log_likelihood
        return self


def format_estimate_report(
    result: EstimationResult, truth: ModelParams | None = None
) -> str:
    """Plain-text estimate table; given the generating params, adds deltas."""
    header = f"{'parameter':<28}{'estimate':>14}{'std error':>14}"
    if truth is not None:
        header += f"{'truth':>14}{'delta':>14}"
    lines = [
        f"runs: {result.n_runs}   offers: {result.n_offers}",
        f"log-likelihood: {result.log_likelihood:.6f}",
        f"converged: {result.converged}   iterations: {result.iterations}"
        f"   evaluations: {result.n_evals}   restarts: {result.restarts}",
        "",
        header,
    ]
    truth_values: list[float] = []
    if truth is not None:
        truth_values = [truth.mu, truth.alpha, truth.p, truth.gamma, *truth.beta]

    def row(label: str, value: float, se_text: str, position: int) -> str:
        text = f"{label:<28}{value:>14.6f}{se_text}"
        if truth is not None:
            target = truth_values[position]
            text += f"{target:>14.6f}{value - target:>14.6f}"
        return text

    lines.append(row("mu", result.params.mu, f"{result.mu_std_error:>14.6f}", 0))
    for k, (name, value, se) in enumerate(
        zip(FREE_PARAM_NAMES, result.named_estimates().values(), result.std_errors)
    ):
        se_text = f"{se:>14.6f}" if math.isfinite(se) else f"{'--':>14}"
        lines.append(row(name, value, se_text, k + 1))
    if result.se_flags:
        lines.append("")
        lines.append("no usable standard error for: " + ", ".join(result.se_flags))
    boundary = [k for k, v in result.boundary.items() if v]
    if boundary:
        lines.append("boundary warnings: " + ", ".join(boundary))
    return "\n".join(lines)


def write_estimate_csv(result: EstimationResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["parameter", "estimate", "std_error"])
        writer.writerow(["mu", repr(result.params.mu), repr(result.mu_std_error)])
        for name, value, se in zip(
            FREE_PARAM_NAMES, result.named_estimates().values(), result.std_errors
        ):
            writer.writerow([name, repr(float(value)), repr(float(se))])
