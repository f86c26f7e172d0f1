"""Command-line front end.

Two subcommands: ``estimate`` runs the requested estimators on a CSV
dataset and emits a JSON report; ``simulate`` runs a Monte Carlo scenario
and emits a metrics CSV plus optional SVG figures. Options can come from
an INI config file (section.key layout) with command-line flags taking
precedence. Exit codes: 0 success, 2 configuration error, 3 data error,
4 estimation failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import configparser

import numpy as np

from . import __version__
from .dataio import config_fingerprint, ingest_csv, report_to_json
from .exceptions import CmrCountError, ConfigError, DataError, EstimationError
from .families import Family, HeapingSpec
from .figures import heap_histogram_svg, metrics_panels_svg
from .fitting import DesignSpec, aic, fit_count, fit_heaped
from .estimators import (
    cmr_dr,
    cmr_dr_heap,
    cmr_iptw,
    cmr_iptw_heap,
    cmr_pg,
    estimate_propensity,
)
from .simulate import SimScenario, gen_heaping, metrics_frame, run_study

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

_CONFIG_SCHEMA = {
    "run": {"seed", "ci_level"},
    "data": {"input", "exposure", "outcome"},
    "model": {"family", "methods", "weight_covariates", "outcome_covariates",
              "susceptibility_covariates", "weight_treatment"},
    "heaping": {"enabled", "eta"},
    "simulate": {"design", "family", "n", "reps", "misspec", "workers"},
    "output": {"report", "metrics", "figures_dir"},
}

_ESTIMATE_METHODS = ("iptw", "pg", "dr", "iptw_heap", "pg_heap", "dr_heap")


@dataclass
class RunConfig:
    """Resolved options for one CLI invocation."""

    command: str
    input: str | None = None
    exposure: str = "a"
    outcome: str = "y"
    family: str = "auto"
    methods: tuple[str, ...] = ()
    weight_covariates: tuple[str, ...] = ()
    outcome_covariates: tuple[str, ...] = ()
    susceptibility_covariates: tuple[str, ...] = ()
    weight_treatment: str = "estimated"
    heaping: bool = False
    eta: int | None = None
    design: str = "partners"
    n: int = 800
    reps: int = 2000
    misspec: str = "none"
    workers: int = 1
    seed: int = 0
    ci_level: float = 0.95
    report_path: str | None = None
    metrics_path: str | None = None
    figures_dir: str | None = None

    def validate(self) -> None:
        if self.command not in ("estimate", "simulate"):
            raise ConfigError(f"unknown command '{self.command}'")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError(f"ci_level must be in (0, 1), got {self.ci_level}")
        if self.eta is not None and not self.heaping:
            raise ConfigError("eta supplied but heaping is off")
        if self.heaping and (self.eta is None or self.eta < 1):
            raise ConfigError("heaping requires an integer eta >= 1")
        if self.weight_treatment not in ("fixed", "estimated", "both"):
            raise ConfigError(
                f"weight_treatment must be fixed/estimated/both, got "
                f"'{self.weight_treatment}'")
        for m in self.methods:
            if m not in _ESTIMATE_METHODS:
                raise ConfigError(f"unknown method '{m}'")
        if self.command == "estimate":
            if not self.input:
                raise ConfigError("estimate requires an input CSV path")
            heap_methods = {m for m in self.methods if m.endswith("_heap")}
            if heap_methods and not self.heaping:
                raise ConfigError(
                    f"methods {sorted(heap_methods)} require heaping enabled")


def _split(value: str) -> tuple[str, ...]:
    return tuple(tok for tok in value.replace(",", " ").split() if tok)


def load_config_file(path) -> dict:
    """Load an INI config file, rejecting unknown sections or keys."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file '{path}'")
    out: dict[str, str] = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section '[{section}]'")
        for key, value in parser.items(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            out[f"{section}.{key}"] = value
    return out


def _config_from_sources(command: str, file_cfg: dict, args) -> RunConfig:
    cfg = RunConfig(command=command)

    def take(key, cast, attr):
        if key in file_cfg:
            try:
                setattr(cfg, attr, cast(file_cfg[key]))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None

    as_bool = lambda s: s.strip().lower() in ("1", "true", "yes", "on")
    take("run.seed", int, "seed")
    take("run.ci_level", float, "ci_level")
    take("data.input", str, "input")
    take("data.exposure", str, "exposure")
    take("data.outcome", str, "outcome")
    take("model.family", str, "family")
    take("model.methods", _split, "methods")
    take("model.weight_covariates", _split, "weight_covariates")
    take("model.outcome_covariates", _split, "outcome_covariates")
    take("model.susceptibility_covariates", _split, "susceptibility_covariates")
    take("model.weight_treatment", str, "weight_treatment")
    take("heaping.enabled", as_bool, "heaping")
    take("heaping.eta", int, "eta")
    take("simulate.design", str, "design")
    take("simulate.family", str, "family")
    take("simulate.n", int, "n")
    take("simulate.reps", int, "reps")
    take("simulate.misspec", str, "misspec")
    take("simulate.workers", int, "workers")
    take("output.report", str, "report_path")
    take("output.metrics", str, "metrics_path")
    take("output.figures_dir", str, "figures_dir")

    overrides = {
        "input": "input", "exposure": "exposure", "outcome": "outcome",
        "family": "family", "weight_treatment": "weight_treatment",
        "eta": "eta", "design": "design", "n": "n", "reps": "reps",
        "misspec": "misspec", "workers": "workers", "seed": "seed",
        "ci_level": "ci_level", "output": None, "metrics": "metrics_path",
        "figures_dir": "figures_dir",
    }
    for arg_name, attr in overrides.items():
        if attr is None:
            continue
        val = getattr(args, arg_name, None)
        if val is not None:
            setattr(cfg, attr, val)
    if getattr(args, "heaping", None) is not None:
        cfg.heaping = args.heaping
    if getattr(args, "methods", None):
        cfg.methods = tuple(args.methods)
    for list_arg, attr in (("weight_covariates", "weight_covariates"),
                           ("outcome_covariates", "outcome_covariates"),
                           ("susceptibility_covariates", "susceptibility_covariates")):
        val = getattr(args, list_arg, None)
        if val:
            setattr(cfg, attr, tuple(val))
    if getattr(args, "output", None) is not None:
        if command == "estimate":
            cfg.report_path = args.output
        else:
            cfg.metrics_path = args.output

    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmrcount",
        description="Causal mean ratio estimation for count outcomes",
    )
    parser.add_argument("--version", action="version", version=f"cmrcount {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--ci-level", dest="ci_level", type=float)
    common.add_argument("--methods", nargs="+")
    common.add_argument("--family")
    common.add_argument("--heaping", action=argparse.BooleanOptionalAction)
    common.add_argument("--eta", type=int)
    common.add_argument("--output", help="main output path (JSON report / metrics CSV)")

    est = sub.add_parser("estimate", parents=[common],
                         help="estimate the CMR from a CSV dataset")
    est.add_argument("--input")
    est.add_argument("--exposure")
    est.add_argument("--outcome")
    est.add_argument("--weight-covariates", dest="weight_covariates", nargs="+")
    est.add_argument("--outcome-covariates", dest="outcome_covariates", nargs="+")
    est.add_argument("--susceptibility-covariates", dest="susceptibility_covariates",
                     nargs="+")
    est.add_argument("--weight-treatment", dest="weight_treatment",
                     choices=("fixed", "estimated", "both"))

    sim = sub.add_parser("simulate", parents=[common],
                         help="run a Monte Carlo study scenario")
    sim.add_argument("--design", choices=("partners", "heaping"))
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--misspec", choices=("none", "MW", "MO", "MB"))
    sim.add_argument("--workers", type=int)
    sim.add_argument("--metrics", help="metrics CSV path (alias for --output)")
    sim.add_argument("--figures-dir", dest="figures_dir")
    return parser


def _estimate_record(method, wt, est=None, error=None):
    if est is None:
        return {"method": method, "weight_treatment": wt, "converged": False,
                "error": error or "failed", "lambda1": None, "lambda0": None,
                "cmr": None, "se": None, "ci_low": None, "ci_high": None,
                "warnings": []}
    return {"method": method, "weight_treatment": est.weight_treatment,
            "converged": bool(est.converged), "error": None,
            "lambda1": est.lambda1, "lambda0": est.lambda0, "cmr": est.cmr,
            "se": est.se, "ci_low": est.ci_low, "ci_high": est.ci_high,
            "warnings": list(est.warnings)}


def run_estimate(cfg: RunConfig) -> tuple[dict, int]:
    """Fit models per config, run estimators, and assemble the JSON report."""
    covs = set(cfg.weight_covariates) | set(cfg.outcome_covariates) \
        | set(cfg.susceptibility_covariates)
    data = ingest_csv(cfg.input, exposure=cfg.exposure, outcome=cfg.outcome,
                      covariates=tuple(sorted(covs)))

    methods = cfg.methods or (("iptw_heap", "pg_heap", "dr_heap") if cfg.heaping
                              else ("iptw", "pg", "dr"))
    heap = HeapingSpec(cfg.eta) if cfg.heaping else None
    odesign = DesignSpec(mean_covariates=cfg.outcome_covariates,
                         susceptibility_covariates=cfg.susceptibility_covariates,
                         include_exposure=True)
    wdesign = DesignSpec(mean_covariates=cfg.weight_covariates,
                         include_exposure=False)

    models: dict = {}
    records: list[dict] = []

    prop = None
    prop_error = None
    if any(m in methods for m in ("iptw", "dr", "iptw_heap", "dr_heap")):
        try:
            prop = estimate_propensity(data, wdesign, exposure=cfg.exposure)
            models["propensity"] = {
                "converged": prop.fit.converged, "loglik": prop.fit.loglik,
                "n_params": prop.fit.n_params,
            }
        except CmrCountError as exc:
            prop_error = str(exc)
            models["propensity"] = {"converged": False, "error": prop_error}

    def fit_family(fam: Family):
        if cfg.heaping:
            return fit_heaped(data, fam, odesign, heap, exposure=cfg.exposure,
                              outcome=cfg.outcome)
        return fit_count(data, fam, odesign, exposure=cfg.exposure,
                         outcome=cfg.outcome)

    outcome_fit = None
    chosen_family = None
    needs_outcome = any(m in methods for m in ("pg", "dr", "pg_heap", "dr_heap",
                                               "iptw_heap"))
    if needs_outcome:
        if cfg.family == "auto":
            aic_table = {}
            fits = {}
            for fam in Family:
                f = fit_family(fam)
                fits[fam] = f
                aic_table[fam.value] = aic(f) if f.converged else None
            models["aic_by_family"] = aic_table
            usable = {fam: v for fam, v in ((f, aic_table[f.value]) for f in Family)
                      if v is not None}
            if not usable:
                raise EstimationError("no outcome family converged for AIC selection")
            chosen_family = min(usable, key=usable.get)
            outcome_fit = fits[chosen_family]
        else:
            chosen_family = Family.parse(cfg.family)
            outcome_fit = fit_family(chosen_family)
        models["outcome"] = {
            "family": chosen_family.value,
            "converged": outcome_fit.converged,
            "loglik": outcome_fit.loglik,
            "n_params": outcome_fit.n_params,
            "aic": aic(outcome_fit) if outcome_fit.converged else None,
            "report_prob": outcome_fit.report_prob,
        }

    weight_treatments = (("fixed", "estimated") if cfg.weight_treatment == "both"
                         else (cfg.weight_treatment,))

    for method in methods:
        try:
            if method == "iptw":
                if prop is None:
                    raise EstimationError(prop_error or "no propensity fit")
                for wt in weight_treatments:
                    records.append(_estimate_record(method, wt, cmr_iptw(
                        data, prop, weight_treatment=wt, exposure=cfg.exposure,
                        outcome=cfg.outcome, level=cfg.ci_level)))
                continue
            if method == "pg":
                est = cmr_pg(data, outcome_fit, exposure=cfg.exposure,
                             outcome=cfg.outcome, level=cfg.ci_level)
            elif method == "dr":
                if prop is None:
                    raise EstimationError(prop_error or "no propensity fit")
                est = cmr_dr(data, prop, outcome_fit, exposure=cfg.exposure,
                             outcome=cfg.outcome, level=cfg.ci_level)
            elif method == "pg_heap":
                est = cmr_pg(data, outcome_fit, exposure=cfg.exposure,
                             outcome=cfg.outcome, level=cfg.ci_level)
            elif method == "dr_heap":
                if prop is None:
                    raise EstimationError(prop_error or "no propensity fit")
                est = cmr_dr_heap(data, prop, chosen_family, odesign, heap,
                                  exposure=cfg.exposure, outcome=cfg.outcome,
                                  level=cfg.ci_level)
            elif method == "iptw_heap":
                if prop is None:
                    raise EstimationError(prop_error or "no propensity fit")
                for wt in weight_treatments:
                    records.append(_estimate_record(method, wt, cmr_iptw_heap(
                        data, prop, chosen_family, heap, weight_treatment=wt,
                        exposure=cfg.exposure, outcome=cfg.outcome,
                        level=cfg.ci_level)))
                continue
            else:
                raise EstimationError(f"unhandled method '{method}'")
            records.append(_estimate_record(method, "n/a", est))
        except CmrCountError as exc:
            records.append(_estimate_record(method, "n/a", error=str(exc)))

    config_dict = {
        "command": "estimate", "input": cfg.input, "exposure": cfg.exposure,
        "outcome": cfg.outcome, "family": cfg.family, "methods": list(methods),
        "weight_covariates": list(cfg.weight_covariates),
        "outcome_covariates": list(cfg.outcome_covariates),
        "susceptibility_covariates": list(cfg.susceptibility_covariates),
        "weight_treatment": cfg.weight_treatment, "heaping": cfg.heaping,
        "eta": cfg.eta, "ci_level": cfg.ci_level, "seed": cfg.seed,
    }
    report = {
        "schema": "cmrcount-estimate-report/1",
        "config": config_dict,
        "n_obs": int(len(data)),
        "estimates": records,
        "models": models,
        "fingerprint": {"package": "cmrcount", "version": __version__,
                        "config_sha256": config_fingerprint(config_dict)},
    }
    failed = any(not r["converged"] for r in records)
    return report, (EXIT_ESTIMATION if failed else EXIT_OK)


def run_simulate(cfg: RunConfig) -> int:
    """Run a simulation scenario, writing the metrics CSV and figures."""
    family = None
    if cfg.design == "partners":
        family = Family.parse(cfg.family if cfg.family != "auto" else "poisson")
    scenario = SimScenario(design=cfg.design, family=family, n=cfg.n,
                           reps=cfg.reps, misspec=cfg.misspec,
                           base_seed=cfg.seed, methods=tuple(cfg.methods))
    metrics = run_study(scenario, workers=cfg.workers)
    frame = metrics_frame(scenario, metrics)

    if cfg.metrics_path:
        frame.to_csv(cfg.metrics_path, index=False)
    else:
        sys.stdout.write(frame.to_csv(index=False))

    if cfg.figures_dir:
        figdir = Path(cfg.figures_dir)
        figdir.mkdir(parents=True, exist_ok=True)
        panels = metrics_panels_svg(
            frame, title=f"{cfg.design} design, misspec={cfg.misspec}")
        (figdir / "metrics.svg").write_text(panels, encoding="utf-8")
        if cfg.design == "heaping":
            sample = gen_heaping(cfg.n, [cfg.seed, 0])
            hist = heap_histogram_svg(sample["y"], sample["y_h"])
            (figdir / "heaping_histogram.svg").write_text(hist, encoding="utf-8")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_config_file(args.config) if args.config else {}
        cfg = _config_from_sources(args.command, file_cfg, args)
        if cfg.command == "estimate":
            report, code = run_estimate(cfg)
            text = report_to_json(report)
            if cfg.report_path:
                Path(cfg.report_path).write_text(text + "\n", encoding="utf-8")
            else:
                sys.stdout.write(text + "\n")
            return code
        return run_simulate(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CmrCountError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
