"""Stacked estimating equations and empirical sandwich variance.

Every estimator in this package solves a stack of unbiased estimating
equations: nuisance-model scores plus target equations for the
counterfactual means (or for the marginal log-ratio coefficient in the
weighted heaped case). The sandwich covariance A^-1 B A^-T is computed
with a numeric bread matrix (central differences, step
cbrt(eps) * (1 + |theta_j|)) and the empirical outer-product meat. The
standard error of the mean ratio follows by the delta method.

The IPTW stacks come in two flavors: "estimated" includes the logistic
weight-model scores, so the variance accounts for weight estimation;
"fixed" treats the weights as known, which is conservative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .exceptions import EstimationError, InvalidParamsError, SingularStackError
from .fitting import CBRT_EPS

__all__ = ["EEStack", "SandwichResult", "build_stack", "sandwich",
           "delta_ratio_se", "wald_ci"]


@dataclass
class EEStack:
    """A solved estimating-equation system.

    ``psi(theta)`` returns the (n, d) matrix of per-observation estimating
    functions. ``target_kind`` is "ratio" when the targets are the two
    counterfactual means (indices ``target_idx``), or "log" when the single
    target is a log-ratio coefficient.
    """

    theta: np.ndarray
    names: list[str]
    psi: Callable[[np.ndarray], np.ndarray]
    target_kind: str
    target_idx: tuple[int, ...]
    n_obs: int

    def residual_norm(self) -> float:
        return float(np.max(np.abs(self.psi(self.theta).sum(axis=0))))


@dataclass
class SandwichResult:
    """Empirical sandwich covariance pieces for one stack."""

    A: np.ndarray
    B: np.ndarray
    V: np.ndarray
    se_cmr: float
    theta_cov: np.ndarray = field(repr=False, default=None)
    residual_norm: float = 0.0


def delta_ratio_se(lambda1: float, lambda0: float, v_target: np.ndarray) -> float:
    """Delta-method SE of lambda1/lambda0 given the 2x2 covariance of the means."""
    if lambda0 <= 0:
        raise InvalidParamsError(f"lambda0 must be positive, got {lambda0}")
    v = np.asarray(v_target, dtype=float)
    g = np.array([1.0 / lambda0, -lambda1 / lambda0**2])
    var = float(g @ v @ g)
    return float(np.sqrt(max(var, 0.0)))


def wald_ci(estimate: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """Symmetric Wald interval on the scale of the estimate."""
    if se < 0:
        raise InvalidParamsError("standard error must be non-negative")
    z = norm.ppf(1.0 - (1.0 - level) / 2.0)
    return (estimate - z * se, estimate + z * se)


def sandwich(stack: EEStack) -> SandwichResult:
    """Empirical sandwich covariance for a solved stack.

    The bread is the numeric Jacobian of the summed estimating functions;
    a condition number above 1e10 raises :class:`SingularStackError`
    naming the most collinear directions.
    """
    theta = np.asarray(stack.theta, dtype=float)
    d = theta.size
    n = stack.n_obs

    psi_hat = stack.psi(theta)
    if psi_hat.shape != (n, d):
        raise EstimationError(
            f"psi returned shape {psi_hat.shape}, expected {(n, d)}")
    resid = float(np.max(np.abs(psi_hat.sum(axis=0))))
    if resid > 1e-3 * max(n, 1):
        raise EstimationError(
            f"stack is not solved at theta (residual max-norm {resid:.3g})")

    B = psi_hat.T @ psi_hat / n

    A = np.empty((d, d))
    for j in range(d):
        h = CBRT_EPS * (1.0 + abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        A[:, j] = -(stack.psi(tp).sum(axis=0) - stack.psi(tm).sum(axis=0)) / (2.0 * h * n)

    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e10:
        _, _, vt = np.linalg.svd(A)
        null_dir = vt[-1]
        worst = [stack.names[i] for i in np.argsort(-np.abs(null_dir))[:3]]
        raise SingularStackError(
            f"bread matrix nearly singular (condition {cond:.3g}); "
            f"near-null direction loads on {worst}")

    a_inv_b = np.linalg.solve(A, B)
    V = np.linalg.solve(A, a_inv_b.T).T
    theta_cov = V / n

    if stack.target_kind == "ratio":
        i1, i0 = stack.target_idx
        lam1, lam0 = theta[i1], theta[i0]
        v2 = theta_cov[np.ix_([i1, i0], [i1, i0])]
        se = delta_ratio_se(lam1, lam0, v2)
    elif stack.target_kind == "log":
        (i1,) = stack.target_idx
        se = float(np.exp(theta[i1]) * np.sqrt(max(theta_cov[i1, i1], 0.0)))
    else:
        raise InvalidParamsError(f"unknown target kind '{stack.target_kind}'")

    return SandwichResult(A=A, B=B, V=V, se_cmr=se, theta_cov=theta_cov,
                          residual_norm=resid)


def _hajek_means(y, a, w):
    lam1 = float(np.sum(w * y * a) / np.sum(w * a))
    lam0 = float(np.sum(w * y * (1 - a)) / np.sum(w * (1 - a)))
    return lam1, lam0


def _dr_means(y, a, e, m1, m0):
    lam1 = float(np.mean((a * y - (a - e) * m1) / e))
    lam0 = float(np.mean(((1 - a) * y + (a - e) * m0) / (1 - e)))
    return lam1, lam0


def build_stack(method: str, data, *, exposure: str = "a", outcome: str = "y",
                prop=None, outcome_fit=None,
                weight_treatment: str = "estimated") -> EEStack:
    """Assemble the estimating-equation stack for one estimator.

    ``prop`` is a fitted propensity object (needed for iptw/dr methods) and
    ``outcome_fit`` a count-model :class:`~cmrcount.fitting.FitResult`
    (needed for pg/dr and the heaped variants; for dr_heap its design must
    already carry the signed-weight column). Target estimates are computed
    here from the components, so solving the returned stack reproduces the
    estimator.
    """
    y = data[outcome].to_numpy(dtype=float)
    a = data[exposure].to_numpy(dtype=float)
    n = y.size

    if method in ("iptw", "dr", "dr_heap", "iptw_heap"):
        if prop is None:
            raise EstimationError(f"method '{method}' requires a propensity fit")
        alpha = np.asarray(prop.fit.estimates, dtype=float)
        Xw = prop.fit.model.X
        k_w = alpha.size
        w_names = [f"weight:{nm}" for nm in prop.fit.names]

    if method in ("pg", "dr", "pg_heap", "dr_heap", "iptw_heap"):
        if outcome_fit is None:
            raise EstimationError(f"method '{method}' requires an outcome fit")
        omodel = outcome_fit.model
        gamma = np.asarray(outcome_fit.estimates, dtype=float)
        k_o = gamma.size
        o_names = list(outcome_fit.names)

    def weights_of(al):
        e = expit(np.clip(Xw @ al, -300, 300))
        return e, a / e + (1 - a) / (1 - e)

    if method == "iptw":
        e_hat, w_hat = weights_of(alpha)
        lam1, lam0 = _hajek_means(y, a, w_hat)
        if weight_treatment == "fixed":
            theta = np.array([lam1, lam0])

            def psi(t):
                l1, l0 = t
                return np.column_stack([w_hat * a * (y - l1),
                                        w_hat * (1 - a) * (y - l0)])

            return EEStack(theta, ["lambda1", "lambda0"], psi, "ratio", (0, 1), n)

        theta = np.concatenate([alpha, [lam1, lam0]])

        def psi(t):
            al, (l1, l0) = t[:k_w], t[k_w:]
            e, w = weights_of(al)
            return np.column_stack([Xw * (a - e)[:, None],
                                    w * a * (y - l1),
                                    w * (1 - a) * (y - l0)])

        names = w_names + ["lambda1", "lambda0"]
        return EEStack(theta, names, psi, "ratio", (k_w, k_w + 1), n)

    if method in ("pg", "pg_heap"):
        m1 = omodel.conditional_means(gamma, exposure, 1.0)
        m0 = omodel.conditional_means(gamma, exposure, 0.0)
        lam1, lam0 = float(m1.mean()), float(m0.mean())
        theta = np.concatenate([gamma, [lam1, lam0]])

        def psi(t):
            g, (l1, l0) = t[:k_o], t[k_o:]
            return np.column_stack([
                omodel.obs_score(g),
                omodel.conditional_means(g, exposure, 1.0) - l1,
                omodel.conditional_means(g, exposure, 0.0) - l0,
            ])

        names = o_names + ["lambda1", "lambda0"]
        return EEStack(theta, names, psi, "ratio", (k_o, k_o + 1), n)

    if method == "dr":
        e_hat, _ = weights_of(alpha)
        m1 = omodel.conditional_means(gamma, exposure, 1.0)
        m0 = omodel.conditional_means(gamma, exposure, 0.0)
        lam1, lam0 = _dr_means(y, a, e_hat, m1, m0)
        theta = np.concatenate([alpha, gamma, [lam1, lam0]])

        def psi(t):
            al = t[:k_w]
            g = t[k_w:k_w + k_o]
            l1, l0 = t[k_w + k_o:]
            e, _ = weights_of(al)
            m1t = omodel.conditional_means(g, exposure, 1.0)
            m0t = omodel.conditional_means(g, exposure, 0.0)
            return np.column_stack([
                Xw * (a - e)[:, None],
                omodel.obs_score(g),
                (a * y - (a - e) * m1t) / e - l1,
                ((1 - a) * y + (a - e) * m0t) / (1 - e) - l0,
            ])

        names = w_names + o_names + ["lambda1", "lambda0"]
        return EEStack(theta, names, psi, "ratio",
                       (k_w + k_o, k_w + k_o + 1), n)

    if method == "dr_heap":
        # the signed-weight covariate is a function of the weight-model
        # coefficients, so everything below recomputes it from alpha; when
        # toggling the exposure, predictions substitute the covariate value
        # it would take under that exposure (+1/e under exposure,
        # -1/(1-e) under no exposure), which equals the observed signed
        # weight at the observed exposure
        rcol = _signed_weight_column(outcome_fit)

        def pieces(al):
            e, w = weights_of(al)
            model = omodel.with_columns({rcol: (2 * a - 1) * w})
            return model, 1.0 / e, -1.0 / (1.0 - e)

        def means(al, g):
            model, r1, r0 = pieces(al)
            m1 = model.conditional_means(g, exposure, 1.0, overrides={rcol: r1})
            m0 = model.conditional_means(g, exposure, 0.0, overrides={rcol: r0})
            return model, m1, m0

        _, m1, m0 = means(alpha, gamma)
        lam1, lam0 = float(m1.mean()), float(m0.mean())
        theta = np.concatenate([alpha, gamma, [lam1, lam0]])

        def psi(t):
            al = t[:k_w]
            g = t[k_w:k_w + k_o]
            l1, l0 = t[k_w + k_o:]
            model, m1t, m0t = means(al, g)
            return np.column_stack([
                Xw * (a - expit(np.clip(Xw @ al, -300, 300)))[:, None],
                model.obs_score(g),
                m1t - l1,
                m0t - l0,
            ])

        names = w_names + o_names + ["lambda1", "lambda0"]
        return EEStack(theta, names, psi, "ratio",
                       (k_w + k_o, k_w + k_o + 1), n)

    if method == "iptw_heap":
        # weighted heaped scores; the marginal-model fit carried the weights,
        # here they are re-derived from alpha so the stack sees the coupling
        unweighted = omodel.with_weights(None)
        try:
            delta1_idx = o_names.index(f"mean:{exposure}")
        except ValueError:
            raise EstimationError(
                "marginal model for iptw_heap must include the exposure") from None

        if weight_treatment == "fixed":
            _, w_hat = weights_of(alpha)
            theta = gamma.copy()

            def psi(t):
                return unweighted.obs_score(t) * w_hat[:, None]

            return EEStack(theta, list(o_names), psi, "log", (delta1_idx,), n)

        theta = np.concatenate([alpha, gamma])

        def psi(t):
            al, g = t[:k_w], t[k_w:]
            e, w = weights_of(al)
            return np.column_stack([
                Xw * (a - e)[:, None],
                unweighted.obs_score(g) * w[:, None],
            ])

        names = w_names + list(o_names)
        return EEStack(theta, names, psi, "log", (k_w + delta1_idx,), n)

    raise InvalidParamsError(f"unknown stack method '{method}'")


def _signed_weight_column(outcome_fit):
    design = outcome_fit.design
    extras = list(design.extra_columns) if design is not None else []
    if len(extras) != 1:
        raise EstimationError(
            "dr_heap outcome fit must carry exactly one extra column "
            "(the signed weight)")
    return extras[0]
