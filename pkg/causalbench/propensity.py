"""Propensity scores Pr(Z=1|X) by ridge-stabilised IRLS logistic regression."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

from causalbench.data_model import Dataset
from causalbench.errors import ArityMismatch, ConstantTreatment, SeparationWarning

logger = logging.getLogger(__name__)

DEFAULT_BOUNDS = (0.01, 0.99)


@dataclass(frozen=True)
class IrlsConfig:
    tol: float = 1e-8
    max_iter: int = 50
    ridge: float = 1e-8


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """Fitted logistic model on the original covariate scale.

    ``max_abs_score`` is the final max-norm of the penalized score on the
    standardized working scale the fit iterates on.
    """

    intercept: float
    coefficients: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float
    separated: bool = False

    @property
    def arity(self) -> int:
        return int(self.coefficients.shape[0])

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.arity == 1 else x[None, :]
        if x.shape[1] != self.arity:
            raise ArityMismatch(
                f"Model was fit on {self.arity} covariates, got {x.shape[1]}"
            )
        return self.intercept + x @ self.coefficients


def _deviance(z: np.ndarray, p: np.ndarray) -> float:
    return float(-2.0 * (xlogy(z, p) + xlogy(1 - z, 1 - p)).sum())


def fit_logistic_irls(
    x: np.ndarray, z: np.ndarray, config: IrlsConfig | None = None
) -> LogisticModel:
    """Fit a main-effects logistic model by Newton-Raphson (IRLS).

    Columns are centered and scaled before iterating and the coefficients are
    mapped back afterwards; the ridge penalty acts on slopes only, never on the
    intercept, so the fitted mean matches the treatment rate.

    Args:
        x: n x p covariate matrix (p may be 0)
        z: binary treatment vector
        config: Tolerance on the max |score|, iteration cap and ridge

    Returns:
        LogisticModel: ``converged`` is false and ``separated`` true when the
        deviance collapses towards zero with diverging coefficients

    Raises:
        ConstantTreatment: z has a single value
    """
    config = config or IrlsConfig()
    z = np.asarray(z, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if z.shape[0] != n:
        raise ArityMismatch(f"x has {n} rows but z has {z.shape[0]}")
    if z.min() == z.max():
        raise ConstantTreatment(f"Treatment is constant ({int(z[0])}) across {n} units")

    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    design = np.column_stack([np.ones(n), (x - center) / scale])
    penalty = np.full(p + 1, config.ridge)
    penalty[0] = 0.0

    rate = z.mean()
    beta = np.zeros(p + 1)
    beta[0] = np.log(rate / (1 - rate))
    converged = False
    separated = False
    score_norm = np.inf
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        prob = expit(design @ beta)
        score = design.T @ (z - prob) - penalty * beta
        score_norm = float(np.max(np.abs(score)))
        if score_norm < config.tol:
            converged = True
            iteration -= 1
            break
        w = prob * (1 - prob)
        hessian = (design * w[:, None]).T @ design + np.diag(penalty)
        try:
            step = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hessian, score, rcond=None)[0]
        beta = beta + step
        fitted = expit(design @ beta)
        if _deviance(z, fitted) < 1e-6 * n and np.max(np.abs(beta[1:]), initial=0) > 10:
            separated = True
            score_norm = float(np.max(np.abs(design.T @ (z - fitted) - penalty * beta)))
            break

    if not converged and not separated:
        prob = expit(design @ beta)
        score_norm = float(np.max(np.abs(design.T @ (z - prob) - penalty * beta)))
        converged = score_norm < config.tol
        if not converged and np.max(np.abs(beta[1:]), initial=0) > 5:
            separated = _deviance(z, prob) < 1e-3 * n
    if separated:
        warnings.warn(
            "Logistic fit separates the treatment groups; coefficients diverge",
            SeparationWarning,
            stacklevel=2,
        )
    elif not converged:
        logger.warning(
            "IRLS stopped after %d iterations with max|score| %.3g", iteration, score_norm
        )

    slopes = beta[1:] / scale
    intercept = float(beta[0] - slopes @ center)
    return LogisticModel(
        intercept=intercept,
        coefficients=slopes,
        converged=converged and not separated,
        iterations=iteration,
        max_abs_score=score_norm,
        separated=separated,
    )


def predict_propensity(m: LogisticModel, x: np.ndarray) -> np.ndarray:
    """Inverse-logit of the linear predictor, clipped inside (0, 1)."""
    eps = np.finfo(float).eps
    return np.clip(expit(m.linear_predictor(x)), eps, 1 - eps)


def logit(e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    return np.log(e / (1 - e))


@dataclass(frozen=True, eq=False)
class PositivityReport:
    violations: int
    min: float
    max: float
    bounds: tuple[float, float]
    scores: np.ndarray


def positivity_report(
    e: np.ndarray,
    bounds: tuple[float, float] = DEFAULT_BOUNDS,
    truncate: bool = False,
) -> PositivityReport:
    """Count scores outside ``bounds``; with ``truncate`` clamp them to the bounds.

    ``scores`` holds the (possibly clamped) scores; ``min``/``max`` describe the
    scores before clamping.
    """
    e = np.asarray(e, dtype=float)
    if ((e <= 0) | (e >= 1)).any():
        raise ValueError("Propensity scores must lie strictly inside (0, 1)")
    lo, hi = bounds
    violations = int(((e < lo) | (e > hi)).sum())
    scores = np.clip(e, lo, hi) if truncate else e.copy()
    if violations:
        logger.info("%d propensity scores outside (%g, %g)", violations, lo, hi)
    return PositivityReport(violations, float(e.min()), float(e.max()), bounds, scores)


def estimate_propensity(
    d: Dataset,
    config: IrlsConfig | None = None,
    include_centers: bool = True,
) -> tuple[LogisticModel, np.ndarray]:
    """Fit the default main-effects propensity model on ``d`` and score its units."""
    x, _ = d.design(include_centers=include_centers)
    model = fit_logistic_irls(x, d.z, config)
    return model, predict_propensity(model, x)
