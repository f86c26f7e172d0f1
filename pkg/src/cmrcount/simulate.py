"""Monte Carlo study harness: data generation, misspecification, metrics.

Two designs are implemented. The "partners" design generates a count
outcome from one of the four families with three confounders and a true
log mean ratio of 0.5. The "heaping" design generates a Poisson outcome
whose reports are rounded to the nearest ten for a random 60% of subjects,
with a true log mean ratio of 0.25; its conditional outcome law is Poisson
and the marginal law of each potential outcome is negative binomial.

Replications are seeded independently (one child stream per replication
index), so results are identical for any worker count or execution order.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .exceptions import EstimationError, InvalidParamsError
from .families import Family, HeapingSpec, round_to_grid
from .fitting import DesignSpec, fit_count
from .estimators import (
    cmr_dr,
    cmr_dr_heap,
    cmr_iptw,
    cmr_iptw_heap,
    cmr_pg,
    cmr_pg_heap,
    estimate_propensity,
)

__all__ = [
    "SimScenario",
    "SimMetrics",
    "gen_partners",
    "gen_heaping",
    "apply_misspec",
    "run_study",
    "true_cmr",
    "metrics_frame",
]

PARTNERS_LOG_CMR = 0.5
HEAPING_LOG_CMR = 0.25
HEAPING_ETA = 10
HEAPING_REPORT_PROB = 0.4

_PARTNERS_METHODS = ("iptw", "pg", "dr")
_HEAPING_METHODS = ("iptw", "pg", "dr", "iptw_heap", "pg_heap", "dr_heap")
_MISSPECS = ("none", "MW", "MO", "MB")


@dataclass(frozen=True)
class SimScenario:
    """One simulation configuration."""

    design: str
    family: Family | None = None
    n: int = 800
    reps: int = 2000
    misspec: str = "none"
    base_seed: int = 0
    methods: tuple[str, ...] = ()

    def __post_init__(self):
        if self.design not in ("partners", "heaping"):
            raise InvalidParamsError(f"unknown design '{self.design}'")
        if self.n <= 0 or self.reps <= 0:
            raise InvalidParamsError("n and reps must be positive")
        if self.misspec not in _MISSPECS:
            raise InvalidParamsError(f"unknown misspecification '{self.misspec}'")
        if self.design == "partners" and self.family is None:
            raise InvalidParamsError("partners design requires an outcome family")
        if self.design == "heaping" and self.family not in (None, Family.POISSON):
            raise InvalidParamsError(
                "the heaping design generates a conditionally Poisson outcome")
        if not self.methods:
            default = (_PARTNERS_METHODS if self.design == "partners"
                       else _HEAPING_METHODS)
            object.__setattr__(self, "methods", default)
        known = set(_PARTNERS_METHODS) | set(_HEAPING_METHODS)
        bad = [m for m in self.methods if m not in known]
        if bad:
            raise InvalidParamsError(f"unknown methods {bad}")


@dataclass
class SimMetrics:
    """Summary metrics for one (method, weight treatment) cell.

    ``mse`` is the median estimated standard error and ``ese`` the standard
    deviation of the point estimates; ``ser`` is their ratio. Coverage and
    bias are computed over converged replications only.
    """

    method: str
    weight_treatment: str
    bias_pct: float
    mse: float
    ese: float | None
    ser: float | None
    coverage_pct: float
    nonconv_pct: float
    reps_used: int


def true_cmr(design: str) -> float:
    """Analytic true causal mean ratio for a design."""
    return math.exp(PARTNERS_LOG_CMR if design == "partners" else HEAPING_LOG_CMR)


def _rng_streams(seed, count):
    root = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in root.spawn(count)]


def gen_partners(n: int, family: Family, seed, *, nu_zero: bool = False) -> pd.DataFrame:
    """Generate one partners-design sample with both potential outcomes.

    Covariates, zero-inflation mixing, dispersion mixing, and the count
    draws use separate child streams, so families sharing components (e.g.
    ZIP with ``nu_zero`` versus Poisson) produce identical draws.
    """
    rng_cov, rng_mix, rng_disp, rng_count = _rng_streams(seed, 4)

    l1 = rng_cov.uniform(20.0, 40.0, n)
    eps1 = rng_cov.uniform(-1.0, 1.0, n)
    l2 = rng_cov.binomial(1, expit(-(l1 - 0.5) / 100.0 + eps1)).astype(float)
    eps2 = rng_cov.uniform(-0.5, 0.5, n)
    l3 = rng_cov.binomial(1, expit(-3.0 - (l1 - 0.5) / 100.0 + 1.2 * l2 + eps2)).astype(float)
    a = rng_cov.binomial(1, expit(-0.5 - l1 / 100.0 + 0.5 * l2 + 0.5 * l3)).astype(float)

    mu0 = np.exp(-1.0 - 0.005 * l1 + 0.7 * l2 + 3.5 * l3)
    mu1 = mu0 * math.exp(PARTNERS_LOG_CMR)

    if family.has_dispersion:
        theta = 0.5
        r = 1.0 / theta
        lam0 = rng_disp.gamma(r, mu0 / r)
        lam1 = rng_disp.gamma(r, mu1 / r)
    else:
        lam0, lam1 = mu0, mu1

    y0 = rng_count.poisson(lam0).astype(float)
    y1 = rng_count.poisson(lam1).astype(float)

    if family.zero_inflated:
        nu = expit(-2.5 + l1 / 100.0 - 0.3 * l2 - 2.0 * l3)
        if nu_zero:
            nu = np.zeros(n)
        y0 = y0 * rng_mix.binomial(1, 1.0 - nu)
        y1 = y1 * rng_mix.binomial(1, 1.0 - nu)

    y = a * y1 + (1 - a) * y0
    return pd.DataFrame({"l1": l1, "l2": l2, "l3": l3, "a": a,
                         "y0": y0, "y1": y1, "y": y})


def gen_heaping(n: int, seed, *, report_prob: float = HEAPING_REPORT_PROB,
                eta: int = HEAPING_ETA) -> pd.DataFrame:
    """Generate one heaping-design sample of self-reported counts.

    The exact count is reported with probability ``report_prob``
    independently of the outcome; otherwise the report is the count rounded
    to the nearest multiple of ``eta``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    g = rng.gamma(5.0, 2.0, n)
    l4 = np.log(g)
    a = rng.binomial(1, 1.0 - expit(-0.8 + 0.65 * l4)).astype(float)
    mu0 = np.exp(-0.9 + l4)
    mu1 = mu0 * math.exp(HEAPING_LOG_CMR)
    y0 = rng.poisson(mu0).astype(float)
    y1 = rng.poisson(mu1).astype(float)
    y = a * y1 + (1 - a) * y0
    eps3 = rng.standard_normal(n)
    l5 = expit(-3.0 + l4 + 2.0 * eps3)
    delta = rng.binomial(1, report_prob, n).astype(float)
    y_h = delta * y + (1 - delta) * round_to_grid(y.astype(np.int64), eta)
    return pd.DataFrame({"l4": l4, "l5": l5, "a": a, "y0": y0, "y1": y1,
                         "y": y, "delta": delta, "y_h": y_h})


def apply_misspec(scenario: SimScenario, role: str) -> DesignSpec:
    """Design for the weight or outcome model under the scenario's regime.

    Partners misspecification drops the drug-use covariate; heaping
    misspecification substitutes the noisy surrogate for the true covariate.
    """
    if role not in ("weight", "outcome"):
        raise InvalidParamsError(f"unknown model role '{role}'")
    wrong = scenario.misspec in (("MW", "MB") if role == "weight" else ("MO", "MB"))
    if scenario.design == "partners":
        covs = ("l1", "l3") if wrong else ("l1", "l2", "l3")
    else:
        covs = ("l5",) if wrong else ("l4",)
    if role == "weight":
        return DesignSpec(mean_covariates=covs, include_exposure=False)
    zero_covs = ()
    if scenario.design == "partners" and scenario.family is not None \
            and scenario.family.zero_inflated:
        zero_covs = covs
    return DesignSpec(mean_covariates=covs, susceptibility_covariates=zero_covs,
                      include_exposure=True)


def _record(method, wt, est=None, error=None):
    if est is None or not est.converged:
        return {"method": method, "weight_treatment": wt, "ok": False,
                "cmr": np.nan, "se": np.nan, "ci_low": np.nan, "ci_high": np.nan,
                "error": error or "did not converge"}
    return {"method": method, "weight_treatment": wt, "ok": True,
            "cmr": est.cmr, "se": est.se, "ci_low": est.ci_low,
            "ci_high": est.ci_high, "error": ""}


def _run_rep(scenario: SimScenario, rep: int) -> list[dict]:
    seed = [scenario.base_seed, rep]
    methods = scenario.methods
    heaping = scenario.design == "heaping"
    if heaping:
        data = gen_heaping(scenario.n, seed)
        outcome_col = "y_h"
        family = Family.POISSON
    else:
        data = gen_partners(scenario.n, scenario.family, seed)
        outcome_col = "y"
        family = scenario.family

    records = []
    needs_prop = any(m in methods for m in ("iptw", "dr", "iptw_heap", "dr_heap"))
    prop = None
    prop_err = None
    if needs_prop:
        try:
            prop = estimate_propensity(data, apply_misspec(scenario, "weight"))
        except Exception as exc:  # noqa: BLE001 - recorded as non-convergence
            prop_err = str(exc)

    odesign = apply_misspec(scenario, "outcome")
    ofit = None
    if "pg" in methods or "dr" in methods:
        ofit = fit_count(data, family, odesign, outcome=outcome_col)

    def attempt(method, wt, fn):
        if fn is None:
            records.append(_record(method, wt, error=prop_err))
            return
        try:
            records.append(_record(method, wt, fn()))
        except Exception as exc:  # noqa: BLE001 - recorded as non-convergence
            records.append(_record(method, wt, error=str(exc)))

    for method in methods:
        if method == "iptw":
            for wt in ("fixed", "estimated"):
                attempt(method, wt, None if prop is None else (
                    lambda wt=wt: cmr_iptw(data, prop, weight_treatment=wt,
                                           outcome=outcome_col)))
        elif method == "pg":
            attempt(method, "n/a",
                    lambda: cmr_pg(data, ofit, outcome=outcome_col))
        elif method == "dr":
            attempt(method, "n/a", None if prop is None else (
                lambda: cmr_dr(data, prop, ofit, outcome=outcome_col)))
        elif method == "pg_heap":
            attempt(method, "n/a",
                    lambda: cmr_pg_heap(data, Family.POISSON, odesign,
                                        HeapingSpec(HEAPING_ETA),
                                        outcome=outcome_col))
        elif method == "dr_heap":
            attempt(method, "n/a", None if prop is None else (
                lambda: cmr_dr_heap(data, prop, Family.POISSON, odesign,
                                    HeapingSpec(HEAPING_ETA), outcome=outcome_col)))
        elif method == "iptw_heap":
            for wt in ("fixed", "estimated"):
                attempt(method, wt, None if prop is None else (
                    lambda wt=wt: cmr_iptw_heap(data, prop, Family.NEGBIN,
                                                HeapingSpec(HEAPING_ETA),
                                                weight_treatment=wt,
                                                outcome=outcome_col)))
    for r in records:
        r["rep"] = rep
    return records


def _worker(args):
    scenario, rep = args
    return _run_rep(scenario, rep)


def _summarize(records: list[dict], truth: float, reps: int) -> list[SimMetrics]:
    order = []
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in records:
        key = (r["method"], r["weight_treatment"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r)

    out = []
    for method, wt in order:
        rows = groups[(method, wt)]
        ok = [r for r in rows if r["ok"]]
        used = len(ok)
        nonconv = 100.0 * (1.0 - used / reps)
        if used == 0:
            out.append(SimMetrics(method, wt, math.nan, math.nan, None, None,
                                  math.nan, nonconv, 0))
            continue
        ests = np.array([r["cmr"] for r in ok])
        ses = np.array([r["se"] for r in ok])
        cover = np.array([r["ci_low"] <= truth <= r["ci_high"] for r in ok])
        bias_pct = 100.0 * (ests.mean() - truth) / truth
        mse = float(np.median(ses))
        ese = float(ests.std(ddof=1)) if used > 1 else None
        ser = (mse / ese) if ese else None
        out.append(SimMetrics(method, wt, float(bias_pct), mse, ese, ser,
                              float(100.0 * cover.mean()), nonconv, used))
    return out


def run_study(scenario: SimScenario, workers: int | None = None,
              return_raw: bool = False):
    """Run all replications of a scenario and summarize per method.

    Estimator failures within a replication are recorded as non-convergence
    for that method only; they never abort the study. With ``workers > 1``
    replications run in a process pool; per-replication seeding makes the
    result independent of the schedule.
    """
    if workers is None:
        workers = 1
    jobs = [(scenario, rep) for rep in range(scenario.reps)]
    if workers > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            chunks = pool.map(_worker, jobs, chunksize=max(1, scenario.reps // (8 * workers)))
    else:
        chunks = [_worker(job) for job in jobs]

    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: r["rep"])
    metrics = _summarize(records, true_cmr(scenario.design), scenario.reps)
    if return_raw:
        return metrics, records
    return metrics


def metrics_frame(scenario: SimScenario, metrics: list[SimMetrics]) -> pd.DataFrame:
    """Metrics table in the documented CSV column layout."""
    rows = []
    for m in metrics:
        rows.append({
            "scenario": scenario.design,
            "family": scenario.family.value if scenario.family else "poisson",
            "misspec": scenario.misspec,
            "method": m.method,
            "weight_treatment": m.weight_treatment,
            "bias_pct": m.bias_pct,
            "mse": m.mse,
            "ese": m.ese,
            "ser": m.ser,
            "coverage_pct": m.coverage_pct,
            "nonconv_pct": m.nonconv_pct,
            "reps_used": m.reps_used,
        })
    return pd.DataFrame(rows)
