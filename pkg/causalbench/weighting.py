"""Propensity weighting estimators: IPW, augmented IPW and IPW plus regression."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from causalbench.data_model import Dataset
from causalbench.effect import EffectEstimate, Estimand
from causalbench.errors import DegenerateArm, ExtremePropensity, NumericalWarning
from causalbench.outcome_models import treatment_coefficient
from causalbench.propensity import DEFAULT_BOUNDS

logger = logging.getLogger(__name__)


class Predictor(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-unit weights for one estimand.

    ``raw`` holds the Horvitz-Thompson weights (treated weights are 1 for ATT);
    ``weights`` is ``raw`` rescaled to sum to 1 within each arm when
    ``normalized`` is set.
    """

    weights: np.ndarray
    raw: np.ndarray
    z: np.ndarray
    e: np.ndarray
    estimand: Estimand
    normalized: bool
    flags: tuple[str, ...] = field(default_factory=tuple)


def _check_scores(
    e: np.ndarray, bounds: tuple[float, float] | None, truncate: bool
) -> tuple[np.ndarray, tuple[str, ...]]:
    e = np.asarray(e, dtype=float).ravel()
    if ((e <= 0) | (e >= 1)).any() or not np.isfinite(e).all():
        raise ExtremePropensity("Propensity scores must lie strictly inside (0, 1)")
    if bounds is None:
        return e, ()
    lo, hi = bounds
    outside = (e < lo) | (e > hi)
    if not outside.any():
        return e, ()
    if not truncate:
        raise ExtremePropensity(
            f"{int(outside.sum())} propensity scores outside ({lo}, {hi}) "
            "and truncation is disabled"
        )
    warnings.warn(
        f"Truncated {int(outside.sum())} propensity scores to ({lo}, {hi})",
        NumericalWarning,
        stacklevel=3,
    )
    return np.clip(e, lo, hi), ("truncated_pscores",)


def make_weights(
    z: np.ndarray,
    e: np.ndarray,
    estimand: Estimand = Estimand.ATE,
    normalized: bool = True,
    bounds: tuple[float, float] | None = DEFAULT_BOUNDS,
    truncate: bool = True,
) -> WeightVector:
    """Inverse-probability weights.

    ATE: z/e for treated and (1-z)/(1-e) for controls. ATT: 1 for treated and
    e/(1-e) for controls. Hajek normalization is the default.

    Raises:
        ExtremePropensity: A score lies outside ``bounds`` and ``truncate`` is off
    """
    estimand = Estimand.parse(estimand)
    z = np.asarray(z).ravel().astype(int)
    e, flags = _check_scores(e, bounds, truncate)
    treated = z == 1
    if estimand is Estimand.ATE:
        raw = np.where(treated, 1.0 / e, 1.0 / (1.0 - e))
    else:
        raw = np.where(treated, 1.0, e / (1.0 - e))
    weights = raw.copy()
    if normalized:
        for mask in (treated, ~treated):
            total = raw[mask].sum()
            if total > 0:
                weights[mask] = raw[mask] / total
    return WeightVector(weights, raw, z, e, estimand, normalized, flags)


def ipw_estimate(
    d: Dataset,
    w: WeightVector,
    outcome: str | None = None,
    method_id: str = "ipw",
) -> EffectEstimate:
    """Weighted difference in outcome means with a sandwich standard error.

    The standard error treats the propensity scores as known.

    Raises:
        DegenerateArm: An arm carries no weight
    """
    y = d.outcome(outcome)
    treated = w.z == 1
    for label, mask in (("treated", treated), ("control", ~treated)):
        if w.raw[mask].sum() <= 0:
            raise DegenerateArm(f"The {label} arm has zero total weight")

    if w.normalized:
        parts = []
        variance = 0.0
        for mask in (treated, ~treated):
            omega = w.raw[mask] / w.raw[mask].sum()
            mean = float(omega @ y[mask])
            variance += float(omega**2 @ (y[mask] - mean) ** 2)
            parts.append(mean)
        tau = parts[0] - parts[1]
        se = float(np.sqrt(variance))
    else:
        sign = np.where(treated, 1.0, -1.0)
        if w.estimand is Estimand.ATE:
            summand = sign * w.raw * y
        else:
            summand = sign * w.raw * y * d.n / treated.sum()
        tau = float(summand.mean())
        se = float(summand.std(ddof=1) / np.sqrt(d.n))
    return EffectEstimate.normal(
        method_id,
        w.estimand,
        tau,
        se,
        d.n,
        outcome=outcome or d.outcome_names[0],
        flags=w.flags,
    )


def _predictions(model: Predictor | np.ndarray, x: np.ndarray) -> np.ndarray:
    if isinstance(model, np.ndarray):
        return np.asarray(model, dtype=float).ravel()
    return np.asarray(model.predict(x), dtype=float).ravel()


def aipw_estimate(
    d: Dataset,
    e: np.ndarray,
    mu1: Predictor | np.ndarray,
    mu0: Predictor | np.ndarray,
    outcome: str | None = None,
    estimand: Estimand = Estimand.ATE,
    include_centers: bool = True,
    bounds: tuple[float, float] = DEFAULT_BOUNDS,
    method_id: str = "aipw",
) -> EffectEstimate:
    """Augmented IPW estimate.

    ATE summand: mu1 - mu0 + z(y - mu1)/e - (1-z)(y - mu0)/(1-e). The ATT
    variant averages z(y - mu0) - (1-z)e(y - mu0)/(1-e) over the treated.
    The outcome models may be fitted predictors or precomputed predictions.
    """
    estimand = Estimand.parse(estimand)
    x, _ = d.design(include_centers=include_centers)
    y = d.outcome(outcome)
    z = d.z.astype(float)
    e, flags = _check_scores(e, bounds, truncate=True)
    m1 = _predictions(mu1, x)
    m0 = _predictions(mu0, x)
    if estimand is Estimand.ATE:
        summand = m1 - m0 + z * (y - m1) / e - (1 - z) * (y - m0) / (1 - e)
    else:
        share = z.mean()
        if share == 0:
            raise DegenerateArm("No treated units for the ATT")
        summand = (z * (y - m0) - (1 - z) * e * (y - m0) / (1 - e)) / share
    tau = float(summand.mean())
    se = float(summand.std(ddof=1) / np.sqrt(d.n))
    return EffectEstimate.normal(
        method_id, estimand, tau, se, d.n, outcome=outcome or d.outcome_names[0], flags=flags
    )


def ipw_regression_estimate(
    d: Dataset,
    w: WeightVector,
    outcome: str | None = None,
    include_centers: bool = True,
    method_id: str = "ipwra",
) -> EffectEstimate:
    """Weighted least squares of y on (z, X) with the raw IPW weights; HC2 se."""
    return treatment_coefficient(
        d,
        outcome,
        weights=w.raw,
        include_centers=include_centers,
        method_id=method_id,
        estimand=w.estimand,
    ).with_flags(*w.flags)
