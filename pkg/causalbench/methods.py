"""Registry of built-in estimators addressable by string id.

Ids follow the command line: ``regadj``, ``ipw``, ``aipw``, ``ipwra``,
``psmatch``, ``nnmatch``, ``mdmatch``, ``cardmatch`` and ``sl_tmle``. Matching
ids take a ``+ra`` suffix for regression bias correction, and a few aliases
(``ipw_ht``, ``psmatch_greedy``) preset settings.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from causalbench.balance import DenominatorPolicy
from causalbench.data_model import Dataset
from causalbench.effect import EffectEstimate, Estimand
from causalbench.learners import LearnerKind, LearnerSpec, default_learners, sl_tmle_estimate
from causalbench.matching import (
    DEFAULT_CALIPER_WIDTH,
    BalanceConstraint,
    Caliper,
    CardinalitySolver,
    DistanceMetric,
    DistanceSpec,
    MatchAudit,
    MatchOrder,
    MatchResult,
    audit_match,
    bias_corrected_estimate,
    cardinality_match,
    distance_matrix,
    greedy_nn_match,
    match_outcomes,
    matched_pair_estimate,
    optimal_pair_match,
)
from causalbench.outcome_models import fit_arm_models, regression_adjustment
from causalbench.propensity import DEFAULT_BOUNDS, estimate_propensity
from causalbench.weighting import (
    aipw_estimate,
    ipw_estimate,
    ipw_regression_estimate,
    make_weights,
)

logger = logging.getLogger(__name__)

BIAS_CORRECTION_SUFFIX = "+ra"
PLUGIN_PREFIX = "plugin:"


class Approach(str, Enum):
    """Which model a method relies on; the panels of the summary table."""

    OUTCOME_MODEL = "outcome model"
    TREATMENT_MODEL = "treatment model"
    OUTCOME_AND_TREATMENT = "outcome and treatment"


APPROACH_ORDER = tuple(Approach)


@dataclass(frozen=True, eq=False)
class MethodOutput:
    estimate: EffectEstimate
    pscores: np.ndarray | None = None
    match: MatchResult | None = None
    audit: MatchAudit | None = None


Runner = Callable[[Dataset, str | None, Mapping[str, Any], Estimand, int, bool], MethodOutput]


@dataclass(frozen=True)
class MethodInfo:
    name: str
    approach: Approach
    run: Runner
    matching: bool = False


REGISTRY: dict[str, MethodInfo] = {}
ALIASES: dict[str, tuple[str, dict[str, Any]]] = {
    "ipw_ht": ("ipw", {"normalized": False}),
    "psmatch_greedy": ("psmatch", {"algorithm": "greedy"}),
}


def register(
    name: str, approach: Approach, matching: bool = False
) -> Callable[[Runner], Runner]:
    def decorator(run: Runner) -> Runner:
        REGISTRY[name] = MethodInfo(name, approach, run, matching)
        return run

    return decorator


@dataclass(frozen=True)
class ResolvedMethod:
    info: MethodInfo
    settings: Mapping[str, Any]
    approach: Approach


def resolve(method: str, settings: Mapping[str, Any] | None = None) -> ResolvedMethod:
    """Look up a method id, expanding aliases and the ``+ra`` suffix.

    Raises:
        KeyError: Unknown method id
    """
    merged: dict[str, Any] = {}
    name = method
    if name.endswith(BIAS_CORRECTION_SUFFIX):
        name = name[: -len(BIAS_CORRECTION_SUFFIX)]
        merged["bias_correct"] = True
    if name in ALIASES:
        name, preset = ALIASES[name]
        merged = {**preset, **merged}
    merged.update(settings or {})
    if name not in REGISTRY:
        raise KeyError(f"Unknown method '{method}'")
    info = REGISTRY[name]
    if merged.get("bias_correct") and not info.matching:
        raise KeyError(f"'{method}': bias correction applies to matching methods only")
    approach = info.approach
    if merged.get("bias_correct"):
        approach = Approach.OUTCOME_AND_TREATMENT
    return ResolvedMethod(info, merged, approach)


def is_known(method: str) -> bool:
    try:
        resolve(method)
    except KeyError:
        return False
    return True


def run_method(
    method: str,
    d: Dataset,
    outcome: str | None = None,
    settings: Mapping[str, Any] | None = None,
    estimand: Estimand = Estimand.ATE,
    seed: int = 0,
    point_only: bool = False,
    method_id: str | None = None,
) -> MethodOutput:
    """Run a registered method; ``point_only`` skips inner standard-error work."""
    resolved = resolve(method, settings)
    output = resolved.info.run(
        d, outcome, resolved.settings, Estimand.parse(estimand), seed, point_only
    )
    estimate = output.estimate.relabel(
        method_id or method, outcome or d.outcome_names[0]
    )
    return MethodOutput(estimate, output.pscores, output.match, output.audit)


def default_suite() -> list[str]:
    """The sixteen built-in rows of the summary table."""
    return [
        "regadj",
        "ipw",
        "ipw_ht",
        "aipw",
        "ipwra",
        "psmatch",
        "psmatch+ra",
        "psmatch_greedy",
        "psmatch_greedy+ra",
        "nnmatch",
        "nnmatch+ra",
        "mdmatch",
        "mdmatch+ra",
        "cardmatch",
        "cardmatch+ra",
        "sl_tmle",
    ]


def _bounds(settings: Mapping[str, Any]) -> tuple[float, float]:
    lo, hi = settings.get("bounds", DEFAULT_BOUNDS)
    return float(lo), float(hi)


def _pscores(d: Dataset, settings: Mapping[str, Any]) -> np.ndarray:
    _, e = estimate_propensity(d, include_centers=settings.get("include_centers", True))
    return e


@register("regadj", Approach.OUTCOME_MODEL)
def _regadj(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    reps = 0 if point_only else int(settings.get("bootstrap_reps", 200))
    estimate = regression_adjustment(
        d,
        outcome,
        estimand,
        include_centers=settings.get("include_centers", True),
        bootstrap_reps=reps,
        seed=seed,
    )
    return MethodOutput(estimate)


@register("ipw", Approach.TREATMENT_MODEL)
def _ipw(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    e = _pscores(d, settings)
    w = make_weights(
        d.z,
        e,
        estimand,
        normalized=settings.get("normalized", True),
        bounds=_bounds(settings),
        truncate=settings.get("truncate", True),
    )
    return MethodOutput(ipw_estimate(d, w, outcome), pscores=e)


@register("aipw", Approach.TREATMENT_MODEL)
def _aipw(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    include_centers = settings.get("include_centers", True)
    e = _pscores(d, settings)
    mu1, mu0 = fit_arm_models(d, outcome, include_centers)
    estimate = aipw_estimate(
        d, e, mu1, mu0, outcome, estimand, include_centers, bounds=_bounds(settings)
    )
    return MethodOutput(estimate, pscores=e)


@register("ipwra", Approach.OUTCOME_AND_TREATMENT)
def _ipwra(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    e = _pscores(d, settings)
    w = make_weights(
        d.z, e, estimand, bounds=_bounds(settings), truncate=settings.get("truncate", True)
    )
    estimate = ipw_regression_estimate(
        d, w, outcome, include_centers=settings.get("include_centers", True)
    )
    return MethodOutput(estimate, pscores=e)


def _finish_match(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    match: MatchResult,
    point_only: bool,
    e: np.ndarray | None,
    constraints: tuple[BalanceConstraint, ...] = (),
    caliper: Caliper | None = None,
) -> MethodOutput:
    if settings.get("bias_correct"):
        estimate = bias_corrected_estimate(
            match, d, outcome, include_centers=settings.get("include_centers", True)
        )
    else:
        y_t, y_c = match_outcomes(match, d, outcome)
        estimate = matched_pair_estimate(y_t, y_c).with_flags(*match.flags)
    if match.unmatched_treated:
        estimate = estimate.with_flags("unmatched_treated")
    audit = None
    if not point_only:
        audit = audit_match(
            match, d, constraints, policy=_policy(settings), e=e, caliper=caliper
        )
    return MethodOutput(estimate, pscores=e, match=match, audit=audit)


def _policy(settings: Mapping[str, Any]) -> DenominatorPolicy:
    return DenominatorPolicy(settings.get("denominator_policy", DenominatorPolicy.POOLED_SD.value))


def _pair_match(
    d: Dataset, settings: Mapping[str, Any], spec: DistanceSpec, e: np.ndarray | None
) -> MatchResult:
    dm = distance_matrix(d, spec, e)
    if settings.get("algorithm", "optimal") == "greedy":
        return greedy_nn_match(dm, MatchOrder(settings.get("order", "data_order")))
    return optimal_pair_match(dm)


def _caliper(settings: Mapping[str, Any], default: float | None) -> Caliper | None:
    # an explicit null turns the caliper off
    width = settings.get("caliper", default)
    return None if width is None else Caliper(float(width))


@register("psmatch", Approach.TREATMENT_MODEL, matching=True)
def _psmatch(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    e = _pscores(d, settings)
    spec = DistanceSpec(
        DistanceMetric(settings.get("metric", DistanceMetric.PSCORE_ABS_DIFF.value)),
        _caliper(settings, DEFAULT_CALIPER_WIDTH),
    )
    match = _pair_match(d, settings, spec, e)
    return _finish_match(d, outcome, settings, match, point_only, e, caliper=spec.caliper)


@register("nnmatch", Approach.TREATMENT_MODEL, matching=True)
def _nnmatch(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    spec = DistanceSpec(
        DistanceMetric.MAHALANOBIS,
        include_centers=settings.get("distance_centers", False),
    )
    match = _pair_match(d, {"algorithm": "greedy", **settings}, spec, None)
    return _finish_match(d, outcome, settings, match, point_only, None)


@register("mdmatch", Approach.TREATMENT_MODEL, matching=True)
def _mdmatch(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    e = _pscores(d, settings)
    spec = DistanceSpec(
        DistanceMetric.MAHALANOBIS,
        _caliper(settings, DEFAULT_CALIPER_WIDTH),
        include_centers=settings.get("distance_centers", False),
    )
    match = _pair_match(d, settings, spec, e)
    return _finish_match(d, outcome, settings, match, point_only, e, caliper=spec.caliper)


def _constraints(d: Dataset, settings: Mapping[str, Any]) -> tuple[BalanceConstraint, ...]:
    given = settings.get("constraints")
    if given:
        return tuple(BalanceConstraint(name, float(delta)) for name, delta in given.items())
    delta = float(settings.get("max_std_diff", 0.1))
    _, names = d.design(include_centers=settings.get("distance_centers", False))
    return tuple(BalanceConstraint(name, delta) for name in names)


@register("cardmatch", Approach.TREATMENT_MODEL, matching=True)
def _cardmatch(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    constraints = _constraints(d, settings)
    solver = CardinalitySolver(
        time_limit=float(settings.get("time_limit", 60.0)), policy=_policy(settings)
    )
    match = cardinality_match(
        d, constraints, solver, include_centers=settings.get("distance_centers", False)
    )
    return _finish_match(d, outcome, settings, match, point_only, None, constraints)


def learner_specs(value: Any, seed: int) -> list[LearnerSpec]:
    """Learner list from settings: names (``forest,lasso,boost``) or dicts with a ``kind``."""
    if value is None:
        return default_learners(seed)
    if isinstance(value, str):
        value = [part.strip() for part in value.split(",") if part.strip()]
    specs = []
    for item in value:
        if isinstance(item, str):
            specs.append(LearnerSpec(LearnerKind.parse(item), seed=seed))
        else:
            params = {k: v for k, v in item.items() if k != "kind"}
            specs.append(LearnerSpec(LearnerKind.parse(item["kind"]), params, seed=seed))
    return specs


@register("sl_tmle", Approach.OUTCOME_AND_TREATMENT)
def _sl_tmle(
    d: Dataset,
    outcome: str | None,
    settings: Mapping[str, Any],
    estimand: Estimand,
    seed: int,
    point_only: bool,
) -> MethodOutput:
    include_centers = settings.get("include_centers", True)
    e = _pscores(d, settings)
    estimate = sl_tmle_estimate(
        d,
        outcome,
        estimand,
        learners=learner_specs(settings.get("learners"), seed),
        folds=int(settings.get("folds", 10)),
        seed=seed,
        include_centers=include_centers,
        e=e,
    )
    return MethodOutput(estimate, pscores=e)
