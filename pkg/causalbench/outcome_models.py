"""Linear outcome models with HC2 errors and regression adjustment (g-computation)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import statsmodels.api as sm

from causalbench.data_model import Dataset
from causalbench.effect import EffectEstimate, Estimand
from causalbench.errors import RankDeficient, TooFewUnits

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
DEFAULT_BOOTSTRAP_REPS = 200


@dataclass(frozen=True, eq=False)
class LinearModel:
    """OLS/WLS fit; ``coefficients[0]`` is the intercept when one was added."""

    coefficients: np.ndarray
    sigma2: float
    vcov: np.ndarray
    intercept: bool = True
    n: int = 0
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if self.intercept:
            return self.coefficients[0] + x @ self.coefficients[1:]
        return x @ self.coefficients


def _with_intercept(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(x.shape[0]), x])


def fit_ols(
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    add_intercept: bool = True,
) -> LinearModel:
    """Least squares with HC2 heteroskedasticity-robust covariance.

    Zero-weight rows are dropped before fitting. An ill-conditioned but full
    rank design is solved through the pseudo-inverse and flagged.

    Raises:
        RankDeficient: The (weighted) design does not have full column rank
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).ravel()
    design = _with_intercept(x) if add_intercept else x
    if weights is not None:
        weights = np.asarray(weights, dtype=float).ravel()
        keep = weights > 0
        design, y, weights = design[keep], y[keep], weights[keep]
        root_w = np.sqrt(weights)
    else:
        root_w = np.ones(y.shape[0])
    n, p = design.shape
    whitened = design * root_w[:, None]
    rank = np.linalg.matrix_rank(whitened)
    if n < p or rank < p:
        raise RankDeficient(f"Design has rank {rank} < {p} columns (n={n})")

    flags: list[str] = []
    if np.linalg.cond(whitened) > CONDITION_LIMIT:
        flags.append("ill_conditioned")
        logger.info("design condition number above %.0e; using pseudo-inverse", CONDITION_LIMIT)
    model = sm.WLS(y, design, weights=weights if weights is not None else 1.0)
    result = model.fit(cov_type="HC2")
    vcov = np.asarray(result.cov_params())
    if not np.isfinite(vcov).all():
        # leverage 1 rows make HC2 undefined
        vcov = np.asarray(model.fit(cov_type="HC0").cov_params())
        flags.append("hc0_fallback")
    dof = n - p
    resid = np.asarray(result.wresid)
    sigma2 = float(resid @ resid / dof) if dof > 0 else 0.0
    return LinearModel(
        coefficients=np.asarray(result.params, dtype=float),
        sigma2=sigma2,
        vcov=vcov,
        intercept=add_intercept,
        n=n,
        flags=tuple(flags),
    )


def treatment_coefficient(
    d: Dataset,
    outcome: str | None,
    weights: np.ndarray | None = None,
    include_centers: bool = True,
    method_id: str = "ols",
    estimand: Estimand = Estimand.ATE,
) -> EffectEstimate:
    """z coefficient of y ~ 1 + z + X with its HC2 standard error."""
    x, _ = d.design(include_centers=include_centers)
    fit = fit_ols(np.column_stack([d.z, x]), d.outcome(outcome), weights=weights)
    n_used = d.n if weights is None else int((np.asarray(weights) > 0).sum())
    return EffectEstimate.normal(
        method_id,
        estimand,
        fit.coefficients[1],
        fit.se[1],
        n_used,
        outcome=outcome or d.outcome_names[0],
        flags=fit.flags,
    )


def fit_arm_models(
    d: Dataset, outcome: str | None = None, include_centers: bool = True
) -> tuple[LinearModel, LinearModel]:
    """Separate linear models for the treated and control arms (mu1, mu0)."""
    x, _ = d.design(include_centers=include_centers)
    y = d.outcome(outcome)
    treated = d.treated
    for label, mask in (("treated", treated), ("control", ~treated)):
        if mask.sum() <= x.shape[1] + 2:
            raise TooFewUnits(
                f"{label} arm has {mask.sum()} units for {x.shape[1]} covariates"
            )
    return fit_ols(x[treated], y[treated]), fit_ols(x[~treated], y[~treated])


def _g_computation(
    d: Dataset, outcome: str | None, estimand: Estimand, include_centers: bool
) -> tuple[float, tuple[str, ...]]:
    mu1, mu0 = fit_arm_models(d, outcome, include_centers)
    x, _ = d.design(include_centers=include_centers)
    target = x[d.treated] if estimand is Estimand.ATT else x
    tau = float(np.mean(mu1.predict(target) - mu0.predict(target)))
    return tau, tuple(dict.fromkeys(mu1.flags + mu0.flags))


def regression_adjustment(
    d: Dataset,
    outcome: str | None = None,
    estimand: Estimand = Estimand.ATE,
    include_centers: bool = True,
    bootstrap_reps: int = DEFAULT_BOOTSTRAP_REPS,
    seed: int = 0,
    method_id: str = "regadj",
) -> EffectEstimate:
    """g-computation from separate arm models.

    tau is the mean of mu1(x) - mu0(x) over all units (ATE) or over the
    treated (ATT). The standard error is the sd of a nonparametric bootstrap
    that resamples within each treatment group and refits both arm models;
    ``bootstrap_reps=0`` skips it and reports se 0.
    """
    estimand = Estimand.parse(estimand)
    tau, flags = _g_computation(d, outcome, estimand, include_centers)

    se = 0.0
    failures = 0
    if bootstrap_reps > 0:
        rng = np.random.default_rng(seed)
        groups = [np.flatnonzero(d.z == 1), np.flatnonzero(d.z == 0)]
        draws = []
        for _ in range(bootstrap_reps):
            idx = np.concatenate([rng.choice(g, size=g.size, replace=True) for g in groups])
            try:
                draws.append(_g_computation(d.take(idx), outcome, estimand, include_centers)[0])
            except RankDeficient:
                failures += 1
        if len(draws) < 2:
            raise RankDeficient("Every bootstrap replicate was rank deficient")
        se = float(np.std(draws, ddof=1))
    if failures:
        flags = (*flags, "bootstrap_failures")
    return EffectEstimate.normal(
        method_id,
        estimand,
        tau,
        se,
        d.n,
        outcome=outcome or d.outcome_names[0],
        flags=flags,
    )
