"""Causal mean ratio estimators.

Six estimators of the ratio of counterfactual mean counts under exposure
versus no exposure: inverse probability of treatment weighting, the
parametric g-formula, doubly robust estimation, and counterparts of each
that correct for heaped (grid-rounded) outcome reports. Standard errors
come from the stacked estimating-equation sandwich in
:mod:`cmrcount.inference`; confidence intervals are Wald intervals on the
ratio scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from .exceptions import EstimationError
from .families import Family, HeapingSpec
from .fitting import DesignSpec, FitResult, fit_heaped, fit_logistic
from .inference import build_stack, sandwich, wald_ci

__all__ = [
    "RHAT_COLUMN",
    "PropensityFit",
    "CmrEstimate",
    "estimate_propensity",
    "cmr_iptw",
    "cmr_pg",
    "cmr_dr",
    "cmr_iptw_heap",
    "cmr_pg_heap",
    "cmr_dr_heap",
]

# name of the signed-weight covariate added to heaped doubly robust outcome models
RHAT_COLUMN = "signed_iptw"

_EXTREME_PROPENSITY = 1e-6


@dataclass
class PropensityFit:
    """Fitted exposure model with derived weights.

    ``e`` holds fitted propensities, ``w`` the inverse probability of
    treatment weights, and ``r_hat`` the signed weights (positive for the
    exposed, negative for the unexposed).
    """

    fit: FitResult
    e: np.ndarray
    w: np.ndarray
    r_hat: np.ndarray
    warnings: tuple[str, ...] = ()

    @property
    def alpha(self) -> np.ndarray:
        return self.fit.estimates


@dataclass
class CmrEstimate:
    """Point estimate, standard error, and Wald interval for the mean ratio."""

    lambda1: float
    lambda0: float
    cmr: float
    se: float
    ci_low: float
    ci_high: float
    method: str
    weight_treatment: str = "n/a"
    level: float = 0.95
    converged: bool = True
    warnings: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)


def estimate_propensity(data: pd.DataFrame, design: DesignSpec,
                        exposure: str = "a") -> PropensityFit:
    """Fit the logistic exposure model and derive IPT weights."""
    fit = fit_logistic(data, design, exposure=exposure)
    if not fit.converged:
        raise EstimationError(f"propensity model did not converge: {fit.message}")
    a = data[exposure].to_numpy(dtype=float)
    e = expit(fit.model.X @ fit.estimates)
    w = a / e + (1 - a) / (1 - e)
    r_hat = (2 * a - 1) * w
    warnings = ()
    if np.any(e < _EXTREME_PROPENSITY) or np.any(e > 1 - _EXTREME_PROPENSITY):
        warnings = ("extreme fitted propensities; weights may be unstable",)
    return PropensityFit(fit=fit, e=e, w=w, r_hat=r_hat, warnings=warnings)


def _finish(lam1, lam0, stack, method, weight_treatment, level, warnings=(),
            diagnostics=None):
    sw = sandwich(stack)
    cmr = lam1 / lam0
    lo, hi = wald_ci(cmr, sw.se_cmr, level)
    return CmrEstimate(
        lambda1=lam1, lambda0=lam0, cmr=cmr, se=sw.se_cmr, ci_low=lo, ci_high=hi,
        method=method, weight_treatment=weight_treatment, level=level,
        warnings=tuple(warnings), diagnostics=diagnostics or {},
    )


def cmr_iptw(data: pd.DataFrame, prop: PropensityFit, *,
             weight_treatment: str = "estimated", exposure: str = "a",
             outcome: str = "y", level: float = 0.95) -> CmrEstimate:
    """Weighted-mean-ratio IPTW estimator.

    The point estimate uses ratio-normalized (Hajek) weighted means and is
    identical under both weight treatments; only the standard error differs
    (treating the weights as known is conservative).
    """
    a = data[exposure].to_numpy(dtype=float)
    if a.sum() == 0 or a.sum() == a.size:
        raise EstimationError("both exposure arms must be non-empty")
    if weight_treatment not in ("fixed", "estimated"):
        raise EstimationError(f"unknown weight treatment '{weight_treatment}'")
    stack = build_stack("iptw", data, exposure=exposure, outcome=outcome,
                        prop=prop, weight_treatment=weight_treatment)
    lam1, lam0 = (float(stack.theta[i]) for i in stack.target_idx)
    return _finish(lam1, lam0, stack, "IPTW", weight_treatment, level,
                   warnings=prop.warnings)


def cmr_pg(data: pd.DataFrame, outcome_fit: FitResult, *, exposure: str = "a",
           outcome: str = "y", level: float = 0.95) -> CmrEstimate:
    """Parametric g-formula: average fitted means with the exposure toggled."""
    if not outcome_fit.converged:
        raise EstimationError(f"outcome model did not converge: {outcome_fit.message}")
    heaped = outcome_fit.heap is not None
    stack = build_stack("pg_heap" if heaped else "pg", data, exposure=exposure,
                        outcome=outcome, outcome_fit=outcome_fit)
    lam1, lam0 = (float(stack.theta[i]) for i in stack.target_idx)
    diagnostics = {"loglik": outcome_fit.loglik}
    if heaped:
        diagnostics["report_prob"] = outcome_fit.report_prob
    return _finish(lam1, lam0, stack, "PG_heap" if heaped else "PG", "n/a",
                   level, warnings=outcome_fit.warnings, diagnostics=diagnostics)


def cmr_dr(data: pd.DataFrame, prop: PropensityFit, outcome_fit: FitResult, *,
           exposure: str = "a", outcome: str = "y",
           level: float = 0.95) -> CmrEstimate:
    """Doubly robust estimator combining the weight and outcome models."""
    if not outcome_fit.converged:
        raise EstimationError(f"outcome model did not converge: {outcome_fit.message}")
    stack = build_stack("dr", data, exposure=exposure, outcome=outcome,
                        prop=prop, outcome_fit=outcome_fit)
    lam1, lam0 = (float(stack.theta[i]) for i in stack.target_idx)
    return _finish(lam1, lam0, stack, "DR", "n/a", level,
                   warnings=prop.warnings + outcome_fit.warnings)


def cmr_pg_heap(data: pd.DataFrame, family: Family, design: DesignSpec,
                heap: HeapingSpec, *, exposure: str = "a", outcome: str = "y_h",
                weights=None, level: float = 0.95) -> CmrEstimate:
    """G-formula under heaped reporting.

    The outcome model is fit by the heaped-mixture likelihood; predictions
    are means of the true count, so heaping only reshapes the likelihood.
    """
    fit = fit_heaped(data, family, design, heap, weights=weights,
                     exposure=exposure, outcome=outcome)
    return cmr_pg(data, fit, exposure=exposure, outcome=outcome, level=level)


def cmr_dr_heap(data: pd.DataFrame, prop: PropensityFit, family: Family,
                design: DesignSpec, heap: HeapingSpec, *, exposure: str = "a",
                outcome: str = "y_h", level: float = 0.95) -> CmrEstimate:
    """Doubly robust estimator under heaped reporting.

    Augments the heaped outcome model with the signed weight as a covariate
    (count part only) and standardizes its predictions, holding each
    subject's signed weight at the observed value while toggling exposure.
    """
    if design.extra_columns:
        raise EstimationError(
            "dr_heap builds its own signed-weight column; pass a design "
            "without extra columns")
    aug = replace(
        design,
        mean_covariates=tuple(design.mean_covariates) + (RHAT_COLUMN,),
        extra_columns={RHAT_COLUMN: prop.r_hat},
    )
    fit = fit_heaped(data, family, aug, heap, exposure=exposure, outcome=outcome)
    if not fit.converged:
        raise EstimationError(f"heaped outcome model did not converge: {fit.message}")
    stack = build_stack("dr_heap", data, exposure=exposure, outcome=outcome,
                        prop=prop, outcome_fit=fit)
    lam1, lam0 = (float(stack.theta[i]) for i in stack.target_idx)
    return _finish(lam1, lam0, stack, "DR_heap", "n/a", level,
                   warnings=prop.warnings + fit.warnings,
                   diagnostics={"report_prob": fit.report_prob})


def cmr_iptw_heap(data: pd.DataFrame, prop: PropensityFit, marginal_family: Family,
                  heap: HeapingSpec, *, weight_treatment: str = "estimated",
                  exposure: str = "a", outcome: str = "y_h",
                  level: float = 0.95) -> CmrEstimate:
    """Weighted marginal-model estimator under heaped reporting.

    Fits the marginal count model log(mean) = b0 + b1 * exposure by the
    weight-adjusted heaped likelihood; the mean ratio is exp(b1) with a
    delta-method standard error from the stacked weighted-score sandwich.
    Non-convergence returns a flagged estimate rather than raising.
    """
    if weight_treatment not in ("fixed", "estimated"):
        raise EstimationError(f"unknown weight treatment '{weight_treatment}'")
    design = DesignSpec(mean_covariates=(), include_exposure=True)
    fit = fit_heaped(data, marginal_family, design, heap, weights=prop.w,
                     exposure=exposure, outcome=outcome)
    delta0 = fit.coef("mean:intercept")
    delta1 = fit.coef(f"mean:{exposure}")
    lam1, lam0 = float(np.exp(delta0 + delta1)), float(np.exp(delta0))
    diagnostics = {"report_prob": fit.report_prob, "loglik": fit.loglik}

    if not fit.converged:
        return CmrEstimate(
            lambda1=lam1, lambda0=lam0, cmr=float(np.exp(delta1)), se=float("nan"),
            ci_low=float("nan"), ci_high=float("nan"), method="IPTW_heap",
            weight_treatment=weight_treatment, level=level, converged=False,
            warnings=prop.warnings + fit.warnings + (fit.message,),
            diagnostics=diagnostics,
        )

    stack = build_stack("iptw_heap", data, exposure=exposure, outcome=outcome,
                        prop=prop, outcome_fit=fit,
                        weight_treatment=weight_treatment)
    est = _finish(lam1, lam0, stack, "IPTW_heap", weight_treatment, level,
                  warnings=prop.warnings + fit.warnings, diagnostics=diagnostics)
    return est
