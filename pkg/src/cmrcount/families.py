"""Count distributions and the heaped-reporting mixture mass.

Four outcome families are supported: Poisson, negative binomial (NB),
zero-inflated Poisson (ZIP), and zero-inflated negative binomial (ZINB).
The NB uses the mean/dispersion parameterization with
Var(Y) = mu + mu^2 * theta, so theta -> 0 recovers the Poisson.

Heaped reporting mixes an exact report (probability ``pi``) with a report
rounded to the nearest multiple of a known grid width ``eta``. Midpoints
round half away from zero, which makes the rounding map a partition of the
non-negative integers. All mass evaluations run in log space.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from .exceptions import FitInfeasibleError, InvalidParamsError

__all__ = [
    "Family",
    "CountParams",
    "HeapingSpec",
    "pmf",
    "log_pmf",
    "conditional_mean",
    "round_to_grid",
    "grid_preimage",
    "heaped_mass",
    "heaped_log_mass",
    "heaped_loglik",
]

# Dispersion below this is treated as the Poisson limit of the NB kernel.
_THETA_POISSON_LIMIT = 1e-12


class Family(enum.Enum):
    """Outcome distribution family for a count response."""

    POISSON = "poisson"
    NEGBIN = "negbin"
    ZIP = "zip"
    ZINB = "zinb"

    @property
    def zero_inflated(self) -> bool:
        return self in (Family.ZIP, Family.ZINB)

    @property
    def has_dispersion(self) -> bool:
        return self in (Family.NEGBIN, Family.ZINB)

    @classmethod
    def parse(cls, name: str) -> "Family":
        key = name.strip().lower()
        aliases = {"nb": "negbin", "negative_binomial": "negbin"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InvalidParamsError(
                f"unknown family '{name}'; expected one of "
                "poisson, negbin, zip, zinb"
            ) from None


@dataclass(frozen=True)
class CountParams:
    """Parameters of a single conditional count distribution.

    ``mu`` is the mean of the count component (for ZIP/ZINB, the mean
    within the susceptible subpopulation). ``nu`` is the probability of
    non-susceptibility (structural zero); ``theta`` is the NB dispersion.
    """

    mu: float
    nu: float = 0.0
    theta: float = 0.0

    def validate(self, family: Family) -> None:
        if not np.isfinite(self.mu) or self.mu <= 0:
            raise InvalidParamsError(f"mu must be positive, got {self.mu}")
        if not (0.0 <= self.nu < 1.0):
            raise InvalidParamsError(f"nu must lie in [0, 1), got {self.nu}")
        if self.theta < 0:
            raise InvalidParamsError(f"theta must be non-negative, got {self.theta}")
        if not family.zero_inflated and self.nu != 0.0:
            raise InvalidParamsError(f"{family.value} does not admit nu != 0")
        if not family.has_dispersion and self.theta != 0.0:
            raise InvalidParamsError(f"{family.value} does not admit theta != 0")


@dataclass(frozen=True)
class HeapingSpec:
    """Heaped-reporting model: grid width ``eta`` and exact-report probability.

    ``eta`` is known. ``pi`` may be None when the spec is handed to a fitting
    routine that estimates the reporting probability; evaluation routines
    require a concrete value.
    """

    eta: int
    pi: float | None = None

    def __post_init__(self) -> None:
        if int(self.eta) != self.eta or self.eta < 1:
            raise InvalidParamsError(f"eta must be an integer >= 1, got {self.eta}")
        if self.pi is not None and not (0.0 <= self.pi <= 1.0):
            raise InvalidParamsError(f"pi must lie in [0, 1], got {self.pi}")

    def require_pi(self) -> float:
        if self.pi is None:
            raise InvalidParamsError("heaping spec has no reporting probability set")
        return float(self.pi)


def round_to_grid(y, eta: int):
    """Round counts to the nearest multiple of ``eta``, half away from zero."""
    if eta < 1:
        raise InvalidParamsError(f"eta must be >= 1, got {eta}")
    y = np.asarray(y)
    if np.any(y < 0):
        raise InvalidParamsError("counts must be non-negative")
    multiple = (2 * y + eta) // (2 * eta)
    out = multiple * eta
    return out if out.ndim else out.item()


def grid_preimage(y_h: int, eta: int) -> np.ndarray:
    """All integers that round to ``y_h`` on the eta-grid (empty if off-grid)."""
    if eta < 1:
        raise InvalidParamsError(f"eta must be >= 1, got {eta}")
    if y_h % eta != 0:
        return np.empty(0, dtype=np.int64)
    lo = max(0, y_h - eta // 2)
    hi = y_h + (eta - 1) // 2
    return np.arange(lo, hi + 1, dtype=np.int64)


def candidate_offsets(eta: int) -> np.ndarray:
    """Offsets around a grid multiple covering its full preimage (eta values)."""
    return np.arange(-(eta // 2), (eta - 1) // 2 + 1, dtype=np.int64)


def _nb_log_kernel(y, mu, theta: float, lgamma_y1=None):
    r = 1.0 / theta
    if lgamma_y1 is None:
        lgamma_y1 = gammaln(y + 1.0)
    log_r_frac = np.log(r) - np.log(r + mu)
    log_mu_frac = np.log(mu) - np.log(r + mu)
    return gammaln(y + r) - gammaln(r) - lgamma_y1 + r * log_r_frac + y * log_mu_frac


def _poisson_log_kernel(y, mu, lgamma_y1=None):
    if lgamma_y1 is None:
        lgamma_y1 = gammaln(y + 1.0)
    return y * np.log(mu) - mu - lgamma_y1


def log_pmf_arrays(family: Family, y, mu, nu=None, theta: float = 0.0, lgamma_y1=None):
    """Vectorized log PMF with broadcasting between ``y`` and the parameters.

    ``y`` may be an (n,) vector or an (n, m) candidate matrix; ``mu`` and
    ``nu`` broadcast along the first axis. ``lgamma_y1`` lets callers reuse a
    precomputed log-factorial table for repeated evaluations at fixed counts.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.ndim == 2 and mu.ndim == 1:
        mu = mu[:, None]

    if family.has_dispersion and theta > _THETA_POISSON_LIMIT:
        base = _nb_log_kernel(y, mu, theta, lgamma_y1)
        log_zero_kernel = (1.0 / theta) * (np.log(1.0 / theta) - np.log(1.0 / theta + mu))
    else:
        base = _poisson_log_kernel(y, mu, lgamma_y1)
        log_zero_kernel = -mu

    if not family.zero_inflated:
        return base

    nu = np.asarray(nu, dtype=float)
    if y.ndim == 2 and nu.ndim == 1:
        nu = nu[:, None]
    with np.errstate(divide="ignore"):
        log_nu = np.log(nu)
        log_one_minus_nu = np.log1p(-nu)
    at_zero = np.logaddexp(log_nu, log_one_minus_nu + log_zero_kernel)
    positive = log_one_minus_nu + base
    return np.where(y == 0, at_zero, positive)


def log_pmf(family: Family, params: CountParams, y: int) -> float:
    """Log probability mass at a single non-negative integer count."""
    params.validate(family)
    if int(y) != y or y < 0:
        raise InvalidParamsError(f"y must be a non-negative integer, got {y}")
    val = log_pmf_arrays(
        family, np.array([float(y)]), np.array([params.mu]),
        np.array([params.nu]), params.theta,
    )
    return float(val[0])


def pmf(family: Family, params: CountParams, y: int) -> float:
    """Probability mass at a single count."""
    return float(np.exp(log_pmf(family, params, y)))


def conditional_mean(family: Family, params: CountParams) -> float:
    """Mean of the count: mu for Poisson/NB, (1 - nu) * mu when zero-inflated."""
    params.validate(family)
    if family.zero_inflated:
        return (1.0 - params.nu) * params.mu
    return params.mu


def heaped_log_mass(y_h: int, family: Family, params: CountParams,
                    heap: HeapingSpec) -> float:
    """Log mass of an observed (possibly rounded) report.

    The report equals the true count with probability ``pi`` and the count
    rounded to the eta-grid otherwise; the rounded branch sums the PMF over
    the finite preimage of ``y_h`` (empty when ``y_h`` is off-grid).
    """
    params.validate(family)
    pi = heap.require_pi()
    if int(y_h) != y_h or y_h < 0:
        raise InvalidParamsError(f"y_h must be a non-negative integer, got {y_h}")

    log_exact = log_pmf(family, params, int(y_h))
    pre = grid_preimage(int(y_h), heap.eta)
    if pre.size:
        vals = log_pmf_arrays(
            family, pre.astype(float)[None, :], np.array([params.mu]),
            np.array([params.nu]), params.theta,
        )
        log_rounded = float(logsumexp(vals))
    else:
        log_rounded = -np.inf

    if pi >= 1.0:
        return log_exact
    if pi <= 0.0:
        return log_rounded
    return float(np.logaddexp(np.log(pi) + log_exact, np.log1p(-pi) + log_rounded))


def heaped_mass(y_h: int, family: Family, params: CountParams,
                heap: HeapingSpec) -> float:
    """Mass of an observed report under the heaped-reporting mixture."""
    return float(np.exp(heaped_log_mass(y_h, family, params, heap)))


def heaped_loglik(y_h, family: Family, mu, nu=None, theta: float = 0.0,
                  heap: HeapingSpec = None, weights=None) -> float:
    """Sum of log heaped masses over observations with per-row parameters.

    Raises :class:`FitInfeasibleError` naming the first offending row if any
    observation has zero mass.
    """
    if heap is None:
        raise InvalidParamsError("a HeapingSpec is required")
    pi = heap.require_pi()
    y_h = np.asarray(y_h, dtype=np.int64)
    mu = np.asarray(mu, dtype=float)
    nu = np.zeros_like(mu) if nu is None else np.asarray(nu, dtype=float)

    log_exact = log_pmf_arrays(family, y_h.astype(float), mu, nu, theta)
    cand = y_h[:, None] + candidate_offsets(heap.eta)[None, :]
    on_grid = (y_h % heap.eta) == 0
    valid = (cand >= 0) & on_grid[:, None]
    cand_vals = log_pmf_arrays(family, np.where(valid, cand, 0).astype(float),
                               mu, nu, theta)
    cand_vals = np.where(valid, cand_vals, -np.inf)
    log_rounded = logsumexp(cand_vals, axis=1)

    if pi >= 1.0:
        per_obs = log_exact
    elif pi <= 0.0:
        per_obs = log_rounded
    else:
        per_obs = np.logaddexp(np.log(pi) + log_exact, np.log1p(-pi) + log_rounded)

    if np.any(np.isneginf(per_obs)) or np.any(np.isnan(per_obs)):
        bad = int(np.flatnonzero(~np.isfinite(per_obs))[0])
        raise FitInfeasibleError(
            f"observation at row {bad} (value {int(y_h[bad])}) has zero mass "
            "under the heaped model"
        )
    if weights is not None:
        per_obs = np.asarray(weights, dtype=float) * per_obs
    return float(np.sum(per_obs))
