"""Causal mean ratio estimation for count outcomes.

Implements IPTW, parametric g-formula, and doubly robust estimators of the
causal mean ratio of a binary exposure on a count outcome, together with
variants that correct for heaped (rounded) self-reports, empirical sandwich
variance estimation, and a Monte Carlo study harness.
"""

from .exceptions import (
    CmrCountError,
    ConfigError,
    DataError,
    EstimationError,
    FitInfeasibleError,
    InvalidParamsError,
    SingularStackError,
)
from .families import (
    CountParams,
    Family,
    HeapingSpec,
    conditional_mean,
    grid_preimage,
    heaped_loglik,
    heaped_mass,
    log_pmf,
    pmf,
    round_to_grid,
)
from .fitting import DesignSpec, FitResult, aic, fit_count, fit_heaped, fit_logistic
from .estimators import (
    CmrEstimate,
    PropensityFit,
    cmr_dr,
    cmr_dr_heap,
    cmr_iptw,
    cmr_iptw_heap,
    cmr_pg,
    cmr_pg_heap,
    estimate_propensity,
)
from .inference import EEStack, SandwichResult, build_stack, delta_ratio_se, sandwich, wald_ci
from .simulate import (
    SimMetrics,
    SimScenario,
    apply_misspec,
    gen_heaping,
    gen_partners,
    run_study,
)

__version__ = "0.1.0"

__all__ = [
    "CmrCountError",
    "ConfigError",
    "DataError",
    "EstimationError",
    "FitInfeasibleError",
    "InvalidParamsError",
    "SingularStackError",
    "Family",
    "CountParams",
    "HeapingSpec",
    "pmf",
    "log_pmf",
    "conditional_mean",
    "round_to_grid",
    "grid_preimage",
    "heaped_mass",
    "heaped_loglik",
    "DesignSpec",
    "FitResult",
    "fit_logistic",
    "fit_count",
    "fit_heaped",
    "aic",
    "PropensityFit",
    "CmrEstimate",
    "estimate_propensity",
    "cmr_iptw",
    "cmr_pg",
    "cmr_dr",
    "cmr_iptw_heap",
    "cmr_pg_heap",
    "cmr_dr_heap",
    "EEStack",
    "SandwichResult",
    "build_stack",
    "sandwich",
    "delta_ratio_se",
    "wald_ci",
    "SimScenario",
    "SimMetrics",
    "gen_partners",
    "gen_heaping",
    "apply_misspec",
    "run_study",
]
