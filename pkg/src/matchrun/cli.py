"""Command-line entry point: generate, estimate, counterfactual, reduced-form, curve.

One binary, subcommand style.  All randomness flows from a single ``--seed``;
settings come from built-in defaults, then an optional JSON config file, then
command-line flags (flags win).  Every run echoes the merged settings into
``effective_config.json`` inside the output directory and appends a plain-text
``run.log`` there, so any output directory documents how it was produced.

Exit codes: 0 success, 2 bad configuration (including unknown flags),
3 I/O failure, 4 ordering violation under ``--check-orderings``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dataio, econometrics, estimator, simulator
from .beliefs import InfoRegime
from .core import COVARIATE_NAMES, ModelParams
from .dataio import ConfigError
from .policies import PriorityPolicy

__all__ = ["RunConfig", "check_orderings", "main"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ORDERING = 4

_POLICY_CHOICES = tuple(p.value for p in PriorityPolicy)
_REGIME_CHOICES = tuple(r.value for r in InfoRegime)


@dataclass(frozen=True)
class RunConfig:
    """Merged settings for one command invocation.

    Field defaults are the documented defaults; a JSON config file may
    override them, and command-line flags override the file.  ``policy`` and
    ``regime`` stay ``None`` when never set so each command can pick its own
    default (single cell for generate/curve, the full grid for
    counterfactual).
    """

    command: str
    out: str | None = None
    data: str | None = None
    seed: int = 0
    donors: int = 548
    patients: int = 1348
    policy: str | None = None
    regime: str | None = None
    replications: int = 10
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    max_iters: int | None = None
    restarts: int = 5
    check_orderings: bool = False
    generator: Mapping = field(default_factory=dict)
    truth: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.out is None:
            raise ConfigError("an output directory is required (--out or config 'out')")
        for name in ("seed", "donors", "patients", "replications", "threads", "restarts"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.max_iters is not None and (
            not isinstance(self.max_iters, int) or isinstance(self.max_iters, bool)
        ):
            raise ConfigError(f"max_iters must be an integer, got {self.max_iters!r}")
        if self.policy is not None and self.policy not in _POLICY_CHOICES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {_POLICY_CHOICES}")
        if self.regime is not None and self.regime not in _REGIME_CHOICES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {_REGIME_CHOICES}")
        if not isinstance(self.generator, Mapping) or not isinstance(self.truth, Mapping):
            raise ConfigError("'generator' and 'truth' config entries must be objects")


def _load_config_file(path: str) -> dict:
    with open(path, encoding="utf-8") as handle:
        try:
            raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"command"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def _run_config(args: argparse.Namespace) -> RunConfig:
    file_cfg = _load_config_file(args.config) if args.config else {}
    merged: dict = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "command":
            continue
        flag = getattr(args, f.name, None)
        if flag is not None:
            merged[f.name] = flag
        elif f.name in file_cfg:
            merged[f.name] = file_cfg[f.name]
    return RunConfig(command=args.command, **merged)


def _truth_params(cfg: RunConfig) -> ModelParams:
    """Generator truth: the default Table-5-style values with config overrides."""
    base = dataio.default_truth()
    spec = cfg.truth
    if not spec:
        return base
    unknown = sorted(set(spec) - {"mu", "alpha", "p", "gamma", "beta"})
    if unknown:
        raise ConfigError(f"unknown truth keys: {', '.join(unknown)}")
    beta = np.array(base.beta)
    for name, value in (spec.get("beta") or {}).items():
        if name not in COVARIATE_NAMES:
            raise ConfigError(f"unknown truth beta name {name!r}")
        beta[COVARIATE_NAMES.index(name)] = float(value)
    return ModelParams(
        mu=float(spec.get("mu", base.mu)),
        alpha=float(spec.get("alpha", base.alpha)),
        p=float(spec.get("p", base.p)),
        gamma=float(spec.get("gamma", base.gamma)),
        beta=beta,
    )


def _generator_config(cfg: RunConfig) -> dataio.GeneratorConfig:
    kwargs: dict = {
        "n_donors": cfg.donors,
        "n_patients": cfg.patients,
        "seed": cfg.seed,
        "truth": _truth_params(cfg),
    }
    gen = cfg.generator
    known = {
        "disk_radius_nm",
        "run_size",
        "patient_moments",
        "donor_moments",
        "patient_rates",
        "donor_rates",
        "blood_freqs",
    }
    unknown = sorted(set(gen) - known)
    if unknown:
        raise ConfigError(f"unknown generator keys: {', '.join(unknown)}")
    if "disk_radius_nm" in gen:
        kwargs["disk_radius_nm"] = float(gen["disk_radius_nm"])
    if "run_size" in gen:
        try:
            kwargs["run_size"] = simulator.RunSizeLaw(**gen["run_size"])
        except TypeError as exc:
            raise ConfigError(f"bad run_size entry: {exc}") from exc
    defaults = dataio.GeneratorConfig()
    for side in ("patient_moments", "donor_moments"):
        if side in gen:
            moments = dict(getattr(defaults, side))
            for name, entry in gen[side].items():
                try:
                    moments[name] = dataio.Moments(**entry)
                except TypeError as exc:
                    raise ConfigError(f"bad {side} entry for {name!r}: {exc}") from exc
            kwargs[side] = moments
    for side in ("patient_rates", "donor_rates", "blood_freqs"):
        if side in gen:
            rates = dict(getattr(defaults, side))
            rates.update({k: float(v) for k, v in gen[side].items()})
            kwargs[side] = rates
    return dataio.GeneratorConfig(**kwargs)


def _population_and_truth(cfg: RunConfig):
    """Dataset bundle plus the params simulations should run at.

    An explicit ``truth`` config block wins; otherwise a loaded bundle's
    recorded generating parameters; otherwise the built-in defaults.
    """
    if cfg.data:
        bundle = dataio.load_bundle(cfg.data)
        if cfg.truth:
            return bundle, _truth_params(cfg)
        recorded = bundle.truth_params()
        return bundle, recorded if recorded is not None else _truth_params(cfg)
    return dataio.generate_population(_generator_config(cfg)), _truth_params(cfg)


def check_orderings(reports: Sequence[simulator.ExperimentReport]) -> list[str]:
    """Violations of the expected regime and policy orderings on a 3x3 grid.

    Regime comparisons run down the standard-priority column: removing
    learning should raise allocation by at least 15 points, sharing the
    quality signal should shorten accepted sequences and (weakly) raise
    per-acceptance utility.  Policy comparisons run along the
    social-learning row.
    """
    by = {(r.policy, r.regime): r for r in reports}
    missing = [
        (p.value, r.value) for p in PriorityPolicy for r in InfoRegime if (p, r) not in by
    ]
    if missing:
        raise ValueError(f"ordering check needs the full policy/regime grid; missing {missing}")
    sl = InfoRegime.SOCIAL_LEARNING
    nosl = InfoRegime.NO_SOCIAL_LEARNING
    share = InfoRegime.INFORMATION_SHARING
    optn = {regime: by[(PriorityPolicy.OPTN, regime)] for regime in InfoRegime}
    violations = []
    gap = optn[nosl].allocation_rate - optn[sl].allocation_rate
    if not gap >= 0.15:
        violations.append(
            f"allocation gap (no-learning minus learning) is {100 * gap:.2f} points, expected >= 15"
        )
    seq = {regime: optn[regime].mean_accepted_sequence for regime in InfoRegime}
    if not seq[share] < seq[sl] < seq[nosl]:
        violations.append(
            "accepted-sequence ordering broke: expected info-sharing < social-learning"
            f" < no-social-learning, got {seq[share]:.3f} / {seq[sl]:.3f} / {seq[nosl]:.3f}"
        )
    util = {regime: optn[regime].mean_acceptance_utility for regime in InfoRegime}
    if not (util[share] >= util[sl] and util[sl] > util[nosl]):
        violations.append(
            "acceptance-utility ordering broke: expected info-sharing >= social-learning"
            f" > no-social-learning, got {util[share]:.3f} / {util[sl]:.3f} / {util[nosl]:.3f}"
        )
    row = {policy: by[(policy, sl)] for policy in PriorityPolicy}
    greedy = PriorityPolicy.GREEDY
    standard = PriorityPolicy.OPTN
    reverse = PriorityPolicy.REVERSE_GREEDY
    putil = {policy: row[policy].mean_acceptance_utility for policy in PriorityPolicy}
    if not putil[greedy] > putil[standard] > putil[reverse]:
        violations.append(
            "policy utility ordering broke: expected greedy > optn > reverse-greedy,"
            f" got {putil[greedy]:.3f} / {putil[standard]:.3f} / {putil[reverse]:.3f}"
        )
    pseq = {policy: row[policy].mean_accepted_sequence for policy in PriorityPolicy}
    if not pseq[greedy] < pseq[standard] < pseq[reverse]:
        violations.append(
            "policy sequence ordering broke: expected greedy < optn < reverse-greedy,"
            f" got {pseq[greedy]:.3f} / {pseq[standard]:.3f} / {pseq[reverse]:.3f}"
        )
    palloc = {policy: row[policy].allocation_rate for policy in PriorityPolicy}
    if not palloc[reverse] > palloc[standard] > palloc[greedy]:
        violations.append(
            "policy allocation ordering broke: expected reverse-greedy > optn > greedy,"
            f" got {palloc[reverse]:.3f} / {palloc[standard]:.3f} / {palloc[greedy]:.3f}"
        )
    return violations


def cmd_generate(cfg: RunConfig) -> int:
    gen_cfg = _generator_config(cfg)
    policy = PriorityPolicy(cfg.policy or PriorityPolicy.OPTN.value)
    regime = InfoRegime(cfg.regime or InfoRegime.SOCIAL_LEARNING.value)
    bundle = dataio.generate_population(gen_cfg)
    bundle = dataio.generate_decisions(bundle, gen_cfg.truth, policy, regime, seed=cfg.seed)
    dataio.save_bundle(bundle, cfg.out)
    accepted = int(np.sum(bundle.offers.final_decisions == "A"))
    logger.info(
        "bundle written to %s: %d donors, %d patients, %d offer rows, %d acceptances",
        cfg.out,
        len(bundle.donors),
        len(bundle.patients),
        len(bundle.offers),
        accepted,
    )
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    bundle = dataio.load_bundle(cfg.data)
    result = estimator.fit(bundle, max_iters=cfg.max_iters, restarts=cfg.restarts)
    out = Path(cfg.out)
    estimator.write_estimate_csv(result, out / "estimates.csv")
    report = estimator.format_estimate_report(result, truth=bundle.truth_params())
    (out / "report.txt").write_text(report + "\n", encoding="utf-8")
    print(report)
    if not result.converged:
        logger.warning("estimates are best-effort: the simplex search did not converge")
    return EXIT_OK


def cmd_counterfactual(cfg: RunConfig) -> int:
    population, params = _population_and_truth(cfg)
    policies = [PriorityPolicy(cfg.policy)] if cfg.policy else list(PriorityPolicy)
    regimes = [InfoRegime(cfg.regime)] if cfg.regime else list(InfoRegime)
    reports = []
    for policy in policies:
        for regime in regimes:
            report = simulator.run_experiment(
                population,
                params,
                policy,
                regime,
                replications=cfg.replications,
                seed=cfg.seed,
                threads=cfg.threads,
            )
            logger.info(
                "%s / %s: allocation %.2f%%, mean accepted sequence %.2f",
                policy.value,
                regime.value,
                100 * report.allocation_rate,
                report.mean_accepted_sequence,
            )
            reports.append(report)
    simulator.write_report_csv(reports, Path(cfg.out) / "counterfactual.csv")
    if cfg.check_orderings:
        if len(reports) != 9:
            raise ConfigError(
                "--check-orderings needs the full 3x3 grid; drop --policy/--regime"
            )
        violations = check_orderings(reports)
        if violations:
            for line in violations:
                logger.error("ordering violation: %s", line)
            return EXIT_ORDERING
        logger.info("all regime and policy orderings hold")
    return EXIT_OK


def cmd_reduced_form(cfg: RunConfig) -> int:
    bundle = dataio.load_bundle(cfg.data)
    fits = [
        ("sequence_number", econometrics.fit_linear(econometrics.sequence_number_spec(), bundle)),
        ("provisional_yes", econometrics.fit_logit(econometrics.provisional_yes_spec(), bundle)),
        ("final_yes", econometrics.fit_logit(econometrics.final_yes_spec(), bundle)),
    ]
    econometrics.write_regression_csv(fits, Path(cfg.out) / "reduced_form.csv")
    final = fits[2][1]
    if "sequence_number" in final.names:
        logger.info(
            "final-acceptance sequence coefficient: %.5f (t = %.2f)",
            final.coef("sequence_number"),
            final.t_stat("sequence_number"),
        )
    return EXIT_OK


def cmd_curve(cfg: RunConfig) -> int:
    population, params = _population_and_truth(cfg)
    policy = PriorityPolicy(cfg.policy or PriorityPolicy.OPTN.value)
    regime = InfoRegime(cfg.regime or InfoRegime.SOCIAL_LEARNING.value)
    curve = simulator.curve_experiment(
        population, params, policy, regime, replications=cfg.replications, seed=cfg.seed
    )
    simulator.write_curve_csv(curve, Path(cfg.out) / "curve.csv")
    head = {k: x for k, x in curve if k <= 2}
    logger.info(
        "conditional acceptance at positions 1/2: %.4f / %.4f; cumulative by 50: %.4f",
        head.get(1, float("nan")),
        head.get(2, float("nan")),
        simulator.cumulative_accept_prob(curve, 50),
    )
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "estimate": cmd_estimate,
    "counterfactual": cmd_counterfactual,
    "reduced-form": cmd_reduced_form,
    "curve": cmd_curve,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchrun",
        description=(
            "Simulate sequential organ-offer match runs, fit the structural "
            "acceptance model, and tabulate counterfactual policies."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", help="JSON settings file; command-line flags override its values"
    )
    common.add_argument(
        "--out", help="output directory, created if missing (required here or in the config)"
    )
    common.add_argument(
        "--seed", type=int, help="root seed for every stochastic step (default: 0)"
    )
    common.add_argument(
        "--threads",
        type=int,
        help="simulation thread count; outputs are identical for any value (default: all cores)",
    )

    sizing = argparse.ArgumentParser(add_help=False)
    sizing.add_argument("--donors", type=int, help="donors to draw (default: 548)")
    sizing.add_argument("--patients", type=int, help="patients to draw (default: 1348)")

    cell = argparse.ArgumentParser(add_help=False)
    cell.add_argument("--policy", choices=_POLICY_CHOICES, help="priority policy")
    cell.add_argument("--regime", choices=_REGIME_CHOICES, help="information regime")

    reps = argparse.ArgumentParser(add_help=False)
    reps.add_argument(
        "--replications",
        type=int,
        help="simulated replications per donor (default: 10)",
    )

    gen = sub.add_parser(
        "generate",
        parents=[common, sizing, cell],
        help="draw a synthetic population and its offer/decision panel",
        description=(
            "Draw donor and patient profiles at the configured moments, simulate one "
            "decision panel (default: standard priority under social learning), and "
            "write the bundle CSVs into --out."
        ),
    )
    gen.set_defaults(command="generate")

    est = sub.add_parser(
        "estimate",
        parents=[common],
        help="fit the acceptance model to a dataset bundle",
        description=(
            "Two-step fit: provisional-yes share by counting, then maximum likelihood "
            "for the structural parameters. Writes estimates.csv and report.txt; the "
            "report includes truth-vs-estimate deltas when the bundle records its "
            "generating parameters."
        ),
    )
    est.add_argument("--data", required=True, help="dataset bundle directory")
    est.add_argument(
        "--max-iters",
        type=int,
        dest="max_iters",
        help="cap each simplex pass at this many iterations (default: 500 per free parameter)",
    )
    est.add_argument(
        "--restarts",
        type=int,
        help="extra simplex passes restarted from the best point (default: 5)",
    )
    est.set_defaults(command="estimate")

    cf = sub.add_parser(
        "counterfactual",
        parents=[common, sizing, cell, reps],
        help="simulate the policy-by-regime grid and tabulate outcomes",
        description=(
            "Simulate each selected (policy, regime) cell on a common population and "
            "seed and write one summary row per cell to counterfactual.csv. Default is "
            "the full 3x3 grid; --policy/--regime narrow it."
        ),
    )
    cf.add_argument("--data", help="reuse a saved bundle's population instead of generating one")
    cf.add_argument(
        "--check-orderings",
        action="store_true",
        default=None,
        dest="check_orderings",
        help="verify expected regime/policy orderings; exit 4 if any break",
    )
    cf.set_defaults(command="counterfactual")

    rf = sub.add_parser(
        "reduced-form",
        parents=[common],
        help="run the three description-stage regressions on a bundle",
        description=(
            "Ordinary least squares of sequence number on patient covariates, plus "
            "logits of the provisional and final decisions, with robust standard "
            "errors, written side by side to reduced_form.csv."
        ),
    )
    rf.add_argument("--data", required=True, help="dataset bundle directory")
    rf.set_defaults(command="reduced-form")

    cv = sub.add_parser(
        "curve",
        parents=[common, sizing, cell, reps],
        help="tabulate conditional acceptance probability by sequence position",
        description=(
            "Simulate one (policy, regime) cell and write the conditional acceptance "
            "curve to curve.csv (probability of acceptance at each position given the "
            "run reached it)."
        ),
    )
    cv.add_argument("--data", help="reuse a saved bundle's population instead of generating one")
    cv.set_defaults(command="curve")

    return parser


def _configure_logging(out_dir: Path) -> None:
    package = logging.getLogger("matchrun")
    package.setLevel(logging.INFO)
    for handler in list(package.handlers):
        package.removeHandler(handler)
        handler.close()
    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logfile = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    logfile.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    package.addHandler(stream)
    package.addHandler(logfile)
    package.propagate = False


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _run_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _configure_logging(out)
        (out / "effective_config.json").write_text(
            json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    except OSError as exc:
        print(f"error: cannot prepare output directory {out}: {exc}", file=sys.stderr)
        return EXIT_IO

    logger.info("%s starting (seed %d)", cfg.command, cfg.seed)
    try:
        code = _COMMANDS[cfg.command](cfg)
    except (dataio.ParseError, dataio.IntegrityError) as exc:
        logger.error("bad dataset: %s", exc)
        return EXIT_IO
    except econometrics.SeparationError as exc:
        logger.error("regression failed: %s", exc)
        return EXIT_CONFIG
    except (ConfigError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO
    if code == EXIT_OK:
        logger.info("%s finished", cfg.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
