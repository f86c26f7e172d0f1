"""Maximum-likelihood fitting of propensity, count, and heaped-count models.

A single quasi-Newton driver (L-BFGS-B) backs every model. Logistic and
Poisson log-likelihoods use analytic gradients; NB, ZIP, ZINB, and all
heaped-mixture models use central-difference gradients with step
cbrt(machine eps) * (1 + |theta_j|). Dispersion is optimized on the log
scale and the exact-report probability on the logit scale.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import expit, gammaln, logsumexp

from .exceptions import EstimationError, FitInfeasibleError, InvalidParamsError
from .families import Family, HeapingSpec, candidate_offsets, log_pmf_arrays

__all__ = ["DesignSpec", "FitResult", "fit_logistic", "fit_count", "fit_heaped", "aic"]

CBRT_EPS = float(np.cbrt(np.finfo(float).eps))

_LIN_PRED_CLIP = 300.0
_LOG_DISP_BOUNDS = (np.log(1e-6), np.log(1e4))
_LOGIT_PI_BOUNDS = (-12.0, 12.0)
_MAX_ITER = 500


def central_diff_gradient(fun, x: np.ndarray) -> np.ndarray:
    """Central finite-difference gradient with per-coordinate relative steps."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        h = CBRT_EPS * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        grad[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class DesignSpec:
    """Covariate lists defining the model design matrices.

    ``mean_covariates`` name the predictors of the count mean (an intercept
    is always prepended; the exposure is appended when ``include_exposure``).
    ``susceptibility_covariates`` name the zero-inflation predictors; list
    the exposure column there explicitly if it should enter that part.
    ``extra_columns`` supplies named numeric columns that are not in the
    dataset, e.g. a signed-weight covariate.
    """

    mean_covariates: tuple[str, ...] = ()
    susceptibility_covariates: tuple[str, ...] = ()
    include_exposure: bool = True
    extra_columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mean_covariates", tuple(self.mean_covariates))
        object.__setattr__(
            self, "susceptibility_covariates", tuple(self.susceptibility_covariates)
        )


def _resolve_column(data: pd.DataFrame, name: str, extra: dict) -> np.ndarray:
    if name in extra:
        return np.asarray(extra[name], dtype=float)
    if name in data.columns:
        return data[name].to_numpy(dtype=float)
    raise InvalidParamsError(f"covariate '{name}' not found in dataset or extra columns")


def _build_matrix(data, names, extra, exposure=None):
    n = len(data)
    cols = [np.ones(n)]
    colnames = ["intercept"]
    for nm in names:
        cols.append(_resolve_column(data, nm, extra))
        colnames.append(nm)
    if exposure is not None and exposure not in names:
        cols.append(data[exposure].to_numpy(dtype=float))
        colnames.append(exposure)
    return np.column_stack(cols), colnames


class LogisticModel:
    """Bernoulli log-likelihood for a binary response with a logit link."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n, self.k = self.X.shape

    def _probs(self, beta):
        eta = np.clip(self.X @ beta, -_LIN_PRED_CLIP, _LIN_PRED_CLIP)
        return expit(eta)

    def obs_loglik(self, beta):
        eta = np.clip(self.X @ beta, -_LIN_PRED_CLIP, _LIN_PRED_CLIP)
        # log p for y=1, log(1-p) for y=0, written via log1p(exp(.)) stably
        return self.y * eta - np.logaddexp(0.0, eta)

    def loglik(self, beta):
        return float(np.sum(self.obs_loglik(beta)))

    def grad(self, beta):
        return self.X.T @ (self.y - self._probs(beta))

    def obs_score(self, beta):
        return self.X * (self.y - self._probs(beta))[:, None]


class CountModel:
    """Log-likelihood machinery for count GLMs, zero-inflated and heaped variants.

    Parameter vector layout: mean-part coefficients, susceptibility-part
    coefficients (zero-inflated families), log dispersion (NB families),
    logit reporting probability (heaped models with a free pi).
    """

    def __init__(self, family: Family, Xm, y, Xs=None, heap: HeapingSpec | None = None,
                 weights=None, mean_names=None, zero_names=None):
        self.family = family
        self.Xm = np.asarray(Xm, dtype=float)
        self.Xs = None if Xs is None else np.asarray(Xs, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.n = self.Xm.shape[0]
        self.heap = heap
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.mean_names = list(mean_names or [])
        self.zero_names = list(zero_names or [])

        self.k_mean = self.Xm.shape[1]
        self.k_zero = self.Xs.shape[1] if family.zero_inflated else 0
        self.free_pi = heap is not None and heap.pi is None
        self.k = (self.k_mean + self.k_zero + int(family.has_dispersion)
                  + int(self.free_pi))
        self.mean_slice = slice(0, self.k_mean)
        self.zero_slice = slice(self.k_mean, self.k_mean + self.k_zero)
        self.disp_index = (self.k_mean + self.k_zero) if family.has_dispersion else None
        self.pi_index = self.k - 1 if self.free_pi else None

        self.names = [f"mean:{nm}" for nm in self.mean_names]
        self.names += [f"zero:{nm}" for nm in self.zero_names]
        if family.has_dispersion:
            self.names.append("log_dispersion")
        if self.free_pi:
            self.names.append("logit_report")

        self._lgamma_y1 = gammaln(self.y + 1.0)
        if heap is not None:
            yh = self.y.astype(np.int64)
            cand = yh[:, None] + candidate_offsets(heap.eta)[None, :]
            on_grid = (yh % heap.eta) == 0
            self._cand_valid = (cand >= 0) & on_grid[:, None]
            self._cand = np.where(self._cand_valid, cand, 0).astype(float)
            self._lgamma_cand = gammaln(self._cand + 1.0)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        eta_m = np.clip(self.Xm @ theta[self.mean_slice], -_LIN_PRED_CLIP, _LIN_PRED_CLIP)
        mu = np.exp(eta_m)
        nu = None
        if self.family.zero_inflated:
            eta_s = np.clip(self.Xs @ theta[self.zero_slice], -_LIN_PRED_CLIP, _LIN_PRED_CLIP)
            nu = expit(eta_s)
        disp = np.exp(theta[self.disp_index]) if self.disp_index is not None else 0.0
        if self.heap is None:
            pi = None
        elif self.free_pi:
            pi = float(expit(theta[self.pi_index]))
        else:
            pi = float(self.heap.pi)
        return mu, nu, disp, pi

    def obs_loglik(self, theta):
        """Unweighted per-observation log-likelihood contributions."""
        mu, nu, disp, pi = self.unpack(theta)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            exact = log_pmf_arrays(self.family, self.y, mu, nu, disp, self._lgamma_y1)
            if self.heap is None:
                return exact
            cand_vals = log_pmf_arrays(self.family, self._cand, mu, nu, disp,
                                       self._lgamma_cand)
            cand_vals = np.where(self._cand_valid, cand_vals, -np.inf)
            rounded = logsumexp(cand_vals, axis=1)
            if pi >= 1.0:
                return exact
            if pi <= 0.0:
                return rounded
            return np.logaddexp(np.log(pi) + exact, np.log1p(-pi) + rounded)

    def loglik(self, theta):
        ll = self.obs_loglik(theta)
        if self.weights is not None:
            ll = self.weights * ll
        total = float(np.sum(ll))
        return total if np.isfinite(total) else -np.inf

    def _has_analytic_grad(self):
        return self.family is Family.POISSON and self.heap is None

    def grad(self, theta):
        if self._has_analytic_grad():
            mu, _, _, _ = self.unpack(theta)
            resid = self.y - mu
            if self.weights is not None:
                resid = self.weights * resid
            return self.Xm.T @ resid
        return central_diff_gradient(self.loglik, np.asarray(theta, dtype=float))

    def obs_score(self, theta):
        """Per-observation score of the (weighted) log-likelihood, (n, k)."""
        theta = np.asarray(theta, dtype=float)
        if self._has_analytic_grad():
            mu, _, _, _ = self.unpack(theta)
            score = self.Xm * (self.y - mu)[:, None]
        else:
            score = np.empty((self.n, self.k))
            for j in range(self.k):
                h = CBRT_EPS * (1.0 + abs(theta[j]))
                tp = theta.copy()
                tm = theta.copy()
                tp[j] += h
                tm[j] -= h
                score[:, j] = (self.obs_loglik(tp) - self.obs_loglik(tm)) / (2.0 * h)
        if self.weights is not None:
            score = score * self.weights[:, None]
        return score

    def with_columns(self, overrides: dict) -> "CountModel":
        """Copy of the model with named design columns replaced.

        Precomputed tables are shared; only the touched matrices are copied.
        """
        clone = copy.copy(self)
        Xm, Xs = self.Xm, self.Xs
        for nm, val in overrides.items():
            hit = False
            if nm in self.mean_names:
                if Xm is self.Xm:
                    Xm = Xm.copy()
                Xm[:, self.mean_names.index(nm)] = val
                hit = True
            if Xs is not None and nm in self.zero_names:
                if Xs is self.Xs:
                    Xs = Xs.copy()
                Xs[:, self.zero_names.index(nm)] = val
                hit = True
            if not hit:
                raise InvalidParamsError(f"no design column named '{nm}'")
        clone.Xm, clone.Xs = Xm, Xs
        return clone

    def with_weights(self, weights) -> "CountModel":
        clone = copy.copy(self)
        clone.weights = None if weights is None else np.asarray(weights, dtype=float)
        return clone

    def conditional_means(self, theta, exposure_name=None, exposure_value=None,
                          overrides=None):
        """Fitted means of the true count, optionally with the exposure toggled.

        ``overrides`` maps a column name to replacement values (applied to
        both model parts); heaping never enters the mean function.
        """
        Xm = self.Xm
        Xs = self.Xs
        if exposure_value is not None or overrides:
            Xm = Xm.copy()
            Xs = None if Xs is None else Xs.copy()
            subs = dict(overrides or {})
            if exposure_value is not None:
                subs[exposure_name] = exposure_value
            for nm, val in subs.items():
                if nm in self.mean_names:
                    Xm[:, self.mean_names.index(nm)] = val
                if Xs is not None and nm in self.zero_names:
                    Xs[:, self.zero_names.index(nm)] = val
        theta = np.asarray(theta, dtype=float)
        eta_m = np.clip(Xm @ theta[self.mean_slice], -_LIN_PRED_CLIP, _LIN_PRED_CLIP)
        mu = np.exp(eta_m)
        if not self.family.zero_inflated:
            return mu
        eta_s = np.clip(Xs @ theta[self.zero_slice], -_LIN_PRED_CLIP, _LIN_PRED_CLIP)
        return (1.0 - expit(eta_s)) * mu


@dataclass
class FitResult:
    """Outcome of a maximum-likelihood fit."""

    estimates: np.ndarray
    names: list[str]
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    message: str = ""
    warnings: tuple[str, ...] = ()
    family: Family | None = None
    design: DesignSpec | None = None
    heap: HeapingSpec | None = None
    exposure: str | None = None
    n_obs: int = 0
    model: object = None

    @property
    def n_params(self) -> int:
        return len(self.estimates)

    def coef(self, name: str) -> float:
        try:
            return float(self.estimates[self.names.index(name)])
        except ValueError:
            raise KeyError(f"no parameter named '{name}' in fit ({self.names})") from None

    @property
    def dispersion(self) -> float:
        if "log_dispersion" not in self.names:
            return 0.0
        return float(np.exp(self.coef("log_dispersion")))

    @property
    def report_prob(self) -> float | None:
        """Estimated (or fixed) probability of exact reporting, if heaped."""
        if self.heap is None:
            return None
        if "logit_report" in self.names:
            return float(expit(self.coef("logit_report")))
        return self.heap.pi


def _run_lbfgsb(model, start, bounds=None, max_iter=_MAX_ITER):
    def negll(t):
        val = model.loglik(t)
        return 1e300 if not np.isfinite(val) else -val

    def neggrad(t):
        g = -model.grad(t)
        return np.nan_to_num(g, nan=0.0, posinf=1e12, neginf=-1e12)

    x = np.asarray(start, dtype=float)
    total_iter = 0
    grad_norm = np.inf
    ll = -np.inf
    for _ in range(3):
        res = minimize(
            negll, x, jac=neggrad, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max_iter, "maxfun": 50 * max_iter,
                     "ftol": 1e-13, "gtol": 1e-7},
        )
        x = res.x
        total_iter += res.nit
        grad_norm = float(np.max(np.abs(model.grad(x)))) if x.size else 0.0
        ll = model.loglik(x)
        # restarts reset the Hessian approximation, squeezing the score far
        # below the tolerance that estimating-equation residuals require
        if grad_norm <= 2e-6 * max(model.n, 1):
            break
    converged = (np.isfinite(ll)
                 and grad_norm < 1e-5 * (1.0 + abs(ll))
                 and grad_norm < 1e-5 * max(model.n, 1))
    return x, ll, converged, total_iter, grad_norm


def fit_logistic(data: pd.DataFrame, design: DesignSpec, exposure: str = "a") -> FitResult:
    """Fit a logistic regression of the binary exposure on the design covariates.

    Separation and rank deficiency yield a non-converged result with a
    diagnostic message rather than an exception.
    """
    y = data[exposure].to_numpy(dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise InvalidParamsError(f"exposure column '{exposure}' must be binary 0/1")
    X, colnames = _build_matrix(data, design.mean_covariates, design.extra_columns)
    model = LogisticModel(X, y)

    if y.min() == y.max():
        return FitResult(
            estimates=np.zeros(model.k), names=colnames, loglik=-np.inf,
            converged=False, iterations=0, gradient_norm=np.inf,
            message=f"exposure '{exposure}' has no variation (complete separation)",
            design=design, exposure=exposure, n_obs=model.n, model=model,
        )
    if np.linalg.matrix_rank(X) < X.shape[1]:
        return FitResult(
            estimates=np.zeros(model.k), names=colnames, loglik=-np.inf,
            converged=False, iterations=0, gradient_norm=np.inf,
            message="design matrix is rank deficient",
            design=design, exposure=exposure, n_obs=model.n, model=model,
        )

    start = np.zeros(model.k)
    start[0] = np.log(y.mean() + 0.5)
    est, ll, converged, iters, gnorm = _run_lbfgsb(model, start)

    warnings = ()
    lin = model.X @ est
    if np.max(np.abs(lin)) > 30.0:
        converged = False
        warnings = ("fitted probabilities numerically at 0/1; possible separation",)

    return FitResult(
        estimates=est, names=colnames, loglik=ll, converged=converged,
        iterations=iters, gradient_norm=gnorm,
        message="" if converged else "logistic fit did not converge",
        warnings=warnings, design=design, exposure=exposure,
        n_obs=model.n, model=model,
    )


def _count_model(data, family, design, exposure, outcome, heap, weights):
    y = data[outcome].to_numpy(dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise InvalidParamsError(f"outcome column '{outcome}' must hold non-negative integers")
    expo = exposure if design.include_exposure else None
    Xm, mean_names = _build_matrix(data, design.mean_covariates,
                                   design.extra_columns, exposure=expo)
    Xs, zero_names = (None, [])
    if family.zero_inflated:
        Xs, zero_names = _build_matrix(data, design.susceptibility_covariates,
                                       design.extra_columns)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if np.any(weights <= 0) or weights.shape != y.shape:
            raise InvalidParamsError("weights must be positive with one value per row")
    return CountModel(family, Xm, y, Xs=Xs, heap=heap, weights=weights,
                      mean_names=mean_names, zero_names=zero_names)


def _start_values(model: CountModel, data, family, design, exposure, outcome, weights):
    y = model.y
    start = np.zeros(model.k)
    start[0] = np.log(y.mean() + 0.5)

    if model.heap is not None:
        # heaped models start at the ignore-heaping fit with pi0 = 0.5
        naive = fit_count(data, family, design, weights=weights,
                          exposure=exposure, outcome=outcome)
        k_naive = model.k - int(model.free_pi)
        if naive.converged:
            start[:k_naive] = naive.estimates
        if model.free_pi:
            start[model.pi_index] = 0.0
        return start

    if family is Family.POISSON:
        return start

    if family is Family.ZINB:
        # count part starts at the NB solution
        nb = fit_count(data, Family.NEGBIN, design, weights=weights,
                       exposure=exposure, outcome=outcome)
        if nb.converged:
            start[model.mean_slice] = nb.estimates[: model.k_mean]
            start[model.disp_index] = nb.estimates[model.k_mean]
    else:
        # NB and ZIP count parts start at the Poisson solution
        pois = CountModel(Family.POISSON, model.Xm, y, weights=model.weights,
                          mean_names=model.mean_names)
        p_est, _, p_conv, _, _ = _run_lbfgsb(pois, start[: model.k_mean].copy())
        if p_conv:
            start[model.mean_slice] = p_est

    if family.has_dispersion and start[model.disp_index] == 0.0:
        ybar = y.mean()
        theta0 = (y.var() - ybar) / ybar**2 if ybar > 0 else 0.1
        start[model.disp_index] = np.log(np.clip(theta0, 1e-3, 10.0))

    if family.zero_inflated:
        mu0 = np.exp(np.clip(model.Xm @ start[model.mean_slice],
                             -_LIN_PRED_CLIP, _LIN_PRED_CLIP))
        if family.has_dispersion:
            r = 1.0 / max(np.exp(start[model.disp_index]), 1e-12)
            p0_model = np.mean(np.exp(r * (np.log(r) - np.log(r + mu0))))
        else:
            p0_model = np.mean(np.exp(-mu0))
        # susceptibility intercept at the logit of the zero excess, floored
        excess = min(max(0.01, float(np.mean(y == 0) - p0_model)), 0.99)
        start[model.zero_slice.start] = np.log(excess / (1.0 - excess))

    return start


def _bounds(model: CountModel):
    bounds = [(None, None)] * (model.k_mean + model.k_zero)
    if model.disp_index is not None:
        bounds.append(_LOG_DISP_BOUNDS)
    if model.free_pi:
        bounds.append(_LOGIT_PI_BOUNDS)
    return bounds


def fit_count(data: pd.DataFrame, family: Family, design: DesignSpec,
              weights=None, exposure: str = "a", outcome: str = "y",
              start=None) -> FitResult:
    """Fit a Poisson/NB/ZIP/ZINB regression by (weighted) maximum likelihood.

    Non-convergence is flagged on the result, never raised, so simulation
    harnesses can record its rate.
    """
    model = _count_model(data, family, design, exposure, outcome, None, weights)
    return _fit_model(model, data, family, design, exposure, outcome, weights, start)


def fit_heaped(data: pd.DataFrame, family: Family, design: DesignSpec,
               heap: HeapingSpec, weights=None, exposure: str = "a",
               outcome: str = "y", start=None) -> FitResult:
    """Fit a count model to heaped reports by maximizing the mixture likelihood.

    A ``heap`` with ``pi=None`` estimates the exact-report probability on the
    logit scale jointly with the regression parameters; a concrete ``pi``
    holds it fixed. With ``eta=1`` the reporting probability is not
    identified and the fit carries a warning.
    """
    model = _count_model(data, family, design, exposure, outcome, heap, weights)
    result = _fit_model(model, data, family, design, exposure, outcome, weights, start)

    warnings = list(result.warnings)
    if heap.eta == 1 and model.free_pi:
        warnings.append("reporting probability is not identified when eta=1")
    if model.free_pi and abs(result.estimates[model.pi_index]) >= _LOGIT_PI_BOUNDS[1] - 0.1:
        warnings.append("reporting probability estimate is at the boundary")
    result.warnings = tuple(warnings)
    return result


def _fit_model(model, data, family, design, exposure, outcome, weights, start):
    base = dict(names=model.names, family=family, design=design, heap=model.heap,
                exposure=exposure, n_obs=model.n, model=model)
    if np.linalg.matrix_rank(model.Xm) < model.k_mean or (
            model.Xs is not None and np.linalg.matrix_rank(model.Xs) < model.k_zero):
        return FitResult(
            estimates=np.zeros(model.k), loglik=-np.inf, converged=False,
            iterations=0, gradient_norm=np.inf,
            message="design matrix is rank deficient", **base,
        )

    x0 = np.asarray(start, dtype=float) if start is not None \
        else _start_values(model, data, family, design, exposure, outcome, weights)
    if not np.isfinite(model.loglik(x0)):
        raise FitInfeasibleError(
            "log-likelihood is not finite at the starting values; "
            "check outcome support against the heaping grid"
        )
    est, ll, converged, iters, gnorm = _run_lbfgsb(model, x0, bounds=_bounds(model))
    return FitResult(
        estimates=est, loglik=ll, converged=converged, iterations=iters,
        gradient_norm=gnorm,
        message="" if converged else "fit did not converge", **base,
    )


def aic(fit: FitResult, k: int | None = None) -> float:
    """Akaike information criterion, 2k - 2 loglik."""
    if not fit.converged:
        raise EstimationError("AIC requested for a non-converged fit")
    if k is None:
        k = fit.n_params
    return 2.0 * k - 2.0 * fit.loglik
