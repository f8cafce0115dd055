"""Pair matching: distances, greedy and optimal matching, cardinality matching.

All matching is 1:1 without replacement. Control columns of a distance matrix
are sorted by unit id so that every tie resolves to the lowest control id.
"""

from __future__ import annotations

import logging
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
from scipy.optimize import Bounds, LinearConstraint, linear_sum_assignment, milp
from scipy.spatial.distance import cdist

from causalbench.balance import BalanceRow, DenominatorPolicy, balance_table, max_abs_std_diff
from causalbench.data_model import Dataset
from causalbench.effect import EffectEstimate, Estimand
from causalbench.errors import (
    Infeasible,
    MissingColumn,
    NumericalWarning,
    SingularCovariance,
    TooFewPairs,
    TooFewUnits,
)
from causalbench.outcome_models import treatment_coefficient
from causalbench.propensity import logit

logger = logging.getLogger(__name__)

DEFAULT_CALIPER_WIDTH = 0.2
RIDGE_STEPS = (0.0, 1e-8, 1e-6, 1e-4, 1e-2)


class DistanceMetric(str, Enum):
    PSCORE_ABS_DIFF = "pscore_abs_diff"
    PSCORE_LINEAR = "pscore_linear"
    MAHALANOBIS = "mahalanobis"


class MatchOrder(str, Enum):
    DATA_ORDER = "data_order"
    LARGEST_PSCORE_FIRST = "largest_pscore_first"


@dataclass(frozen=True)
class Caliper:
    """Caliper on the logit propensity score, in multiples of its sd."""

    width: float = DEFAULT_CALIPER_WIDTH

    def __post_init__(self) -> None:
        if not self.width > 0:
            raise ValueError(f"Caliper width must be positive, got {self.width}")


@dataclass(frozen=True)
class DistanceSpec:
    metric: DistanceMetric = DistanceMetric.PSCORE_ABS_DIFF
    caliper: Caliper | None = None
    include_centers: bool = False


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Treated x control distances; +inf marks pairs outside the caliper."""

    values: np.ndarray
    treated_ids: np.ndarray
    control_ids: np.ndarray
    treated_scores: np.ndarray | None = None

    @classmethod
    def from_array(
        cls,
        values: np.ndarray | Sequence[Sequence[float]],
        treated_scores: np.ndarray | None = None,
    ) -> DistanceMatrix:
        values = np.asarray(values, dtype=float)
        return cls(
            values,
            np.arange(values.shape[0]),
            np.arange(values.shape[0], values.shape[0] + values.shape[1]),
            treated_scores,
        )


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    distances: tuple[float, ...]
    unmatched_treated: tuple[int, ...]
    objective: float
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "treated_id": [t for t, _ in self.pairs],
                "control_id": [c for _, c in self.pairs],
                "distance": list(self.distances),
            }
        )


@dataclass(frozen=True)
class BalanceConstraint:
    covariate: str
    max_abs_std_diff: float = 0.1

    def __post_init__(self) -> None:
        if self.max_abs_std_diff < 0:
            raise ValueError("max_abs_std_diff must be nonnegative")


@dataclass(frozen=True)
class CardinalitySolver:
    """Settings for the mixed-integer program behind cardinality matching."""

    method: str = "branch_and_bound"
    time_limit: float = 60.0
    policy: DenominatorPolicy = DenominatorPolicy.POOLED_SD


def pooled_covariance(x_t: np.ndarray, x_c: np.ndarray) -> np.ndarray:
    """Pooled within-group covariance matrix."""
    n_t, n_c = x_t.shape[0], x_c.shape[0]
    if n_t + n_c <= 2:
        raise TooFewUnits("Pooled covariance needs more than 2 units")
    scatter = np.zeros((x_t.shape[1], x_t.shape[1]))
    for group in (x_t, x_c):
        if group.shape[0] > 1:
            centered = group - group.mean(axis=0)
            scatter += centered.T @ centered
    return scatter / (n_t + n_c - 2)


def _repaired_inverse(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    cov = np.atleast_2d(cov)
    scale = float(np.mean(np.diag(cov))) if cov.size else 0.0
    if scale <= 0:
        raise SingularCovariance("Covariance matrix has no variance")
    for ridge in RIDGE_STEPS:
        repaired = cov + ridge * scale * np.eye(cov.shape[0])
        try:
            np.linalg.cholesky(repaired)
        except np.linalg.LinAlgError:
            continue
        return np.linalg.inv(repaired), ridge > 0
    raise SingularCovariance("Covariance is not positive definite after ridge repair")


def mahalanobis_distances(
    x_t: np.ndarray, x_c: np.ndarray, cov: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Pairwise Mahalanobis distances and whether a ridge repair was needed."""
    inverse, repaired = _repaired_inverse(np.asarray(cov, dtype=float))
    return cdist(np.atleast_2d(x_t), np.atleast_2d(x_c), metric="mahalanobis", VI=inverse), repaired


def _split(d: Dataset) -> tuple[np.ndarray, np.ndarray]:
    t_idx = np.flatnonzero(d.treated)
    c_idx = np.flatnonzero(~d.treated)
    c_idx = c_idx[np.argsort(d.ids[c_idx], kind="stable")]
    return t_idx, c_idx


def caliper_threshold(e: np.ndarray, caliper: Caliper) -> float:
    """Largest allowed |logit difference|: width times the sd of logit(e) over all units."""
    return caliper.width * float(np.std(logit(np.asarray(e, dtype=float)), ddof=1))


def distance_matrix(
    d: Dataset, spec: DistanceSpec, e: np.ndarray | None = None
) -> DistanceMatrix:
    """Treated x control distance matrix with caliper violations set to +inf.

    Raises:
        ValueError: A propensity metric or caliper is requested without scores
        SingularCovariance: Mahalanobis covariance cannot be repaired
    """
    t_idx, c_idx = _split(d)
    if e is not None:
        e = np.asarray(e, dtype=float)
    needs_scores = spec.metric is not DistanceMetric.MAHALANOBIS or spec.caliper
    if needs_scores and e is None:
        raise ValueError(f"{spec.metric.value} distances need propensity scores")

    if spec.metric is DistanceMetric.PSCORE_ABS_DIFF:
        assert e is not None
        values = np.abs(e[t_idx][:, None] - e[c_idx][None, :])
    elif spec.metric is DistanceMetric.PSCORE_LINEAR:
        assert e is not None
        lin = logit(e)
        values = np.abs(lin[t_idx][:, None] - lin[c_idx][None, :])
    else:
        x, _ = d.design(include_centers=spec.include_centers)
        cov = pooled_covariance(x[t_idx], x[c_idx])
        values, repaired = mahalanobis_distances(x[t_idx], x[c_idx], cov)
        if repaired:
            warnings.warn(
                "Mahalanobis covariance needed a ridge repair", NumericalWarning, stacklevel=2
            )

    if spec.caliper is not None:
        assert e is not None
        lin = logit(e)
        threshold = caliper_threshold(e, spec.caliper)
        outside = np.abs(lin[t_idx][:, None] - lin[c_idx][None, :]) > threshold
        values = np.where(outside, np.inf, values)
        logger.debug("caliper %.4g on logit scale blocks %d pairs", threshold, outside.sum())

    return DistanceMatrix(
        values=values,
        treated_ids=d.ids[t_idx],
        control_ids=d.ids[c_idx],
        treated_scores=None if e is None else e[t_idx],
    )


def _result(
    dm: DistanceMatrix, rows: Sequence[int], cols: Sequence[int], flags: tuple[str, ...] = ()
) -> MatchResult:
    pairs = tuple(
        (int(dm.treated_ids[r]), int(dm.control_ids[c])) for r, c in zip(rows, cols, strict=True)
    )
    distances = tuple(float(dm.values[r, c]) for r, c in zip(rows, cols, strict=True))
    matched = set(rows)
    unmatched = tuple(
        int(dm.treated_ids[r]) for r in range(dm.values.shape[0]) if r not in matched
    )
    return MatchResult(pairs, distances, unmatched, float(sum(distances)), flags)


def greedy_nn_match(
    dm: DistanceMatrix, order: MatchOrder = MatchOrder.DATA_ORDER
) -> MatchResult:
    """Greedy nearest-neighbour matching without replacement.

    Treated units are processed in ``order``; each takes the nearest remaining
    control with a finite distance. Treated units with none left stay unmatched.
    """
    order = MatchOrder(order)
    n_t = dm.values.shape[0]
    if order is MatchOrder.LARGEST_PSCORE_FIRST:
        if dm.treated_scores is None:
            raise ValueError("largest_pscore_first needs treated propensity scores")
        sequence = np.lexsort((dm.treated_ids, -dm.treated_scores))
    else:
        sequence = np.arange(n_t)
    available = np.ones(dm.values.shape[1], dtype=bool)
    rows: list[int] = []
    cols: list[int] = []
    for r in sequence:
        candidates = np.where(available, dm.values[r], np.inf)
        if not np.isfinite(candidates).any():
            continue
        c = int(np.argmin(candidates))
        available[c] = False
        rows.append(int(r))
        cols.append(c)
    return _result(dm, rows, cols)


def optimal_pair_match(dm: DistanceMatrix) -> MatchResult:
    """Minimum total distance pair matching.

    Solved as a rectangular assignment problem. Infinite entries are replaced
    by a penalty larger than any feasible total, so the solution first
    maximises the number of feasible pairs and then minimises their cost.
    """
    values = dm.values
    finite = np.isfinite(values)
    if values.size == 0 or not finite.any():
        return _result(dm, [], [])
    k = min(values.shape)
    penalty = (float(values[finite].max()) + 1.0) * (k + 1)
    rows, cols = linear_sum_assignment(np.where(finite, values, penalty))
    keep = finite[rows, cols]
    return _result(dm, rows[keep].tolist(), cols[keep].tolist())


def _constraint_columns(
    d: Dataset, constraints: Sequence[BalanceConstraint]
) -> list[int]:
    names = d.column_names
    missing = [c.covariate for c in constraints if c.covariate not in names]
    if missing:
        raise MissingColumn(f"Balance constraints name unknown covariates: {', '.join(missing)}")
    return [names.index(c.covariate) for c in constraints]


def cardinality_match(
    d: Dataset,
    constraints: Sequence[BalanceConstraint],
    solver: CardinalitySolver | None = None,
    include_centers: bool = False,
) -> MatchResult:
    """Largest equal-size treated/control subsets meeting mean-balance constraints.

    The integer program maximises the number of selected treated units m
    subject to equal subset sizes and, per constraint,
    |sum_t x - sum_c x| <= delta * sd * m, which is linear because m is itself
    a sum of the selection variables. sd comes from the full, unmatched
    sample. Selected units are then paired by optimal matching on the
    Mahalanobis distance.

    Raises:
        Infeasible: No nonempty pair of subsets meets the constraints
    """
    solver = solver or CardinalitySolver()
    t_idx, c_idx = _split(d)
    n_t, n_c = t_idx.size, c_idx.size
    if n_t == 0 or n_c == 0:
        raise Infeasible("Cardinality matching needs treated and control units")
    columns = _constraint_columns(d, constraints)

    rows = [np.concatenate([np.ones(n_t), -np.ones(n_c)]), np.concatenate([np.ones(n_t), np.zeros(n_c)])]
    lower = [0.0, 1.0]
    upper = [0.0, np.inf]
    for constraint, j in zip(constraints, columns, strict=True):
        x_t, x_c = d.x[t_idx, j], d.x[c_idx, j]
        if solver.policy is DenominatorPolicy.CONTROL_SD:
            sd = float(np.std(x_c, ddof=1))
        else:
            sd = float(np.sqrt((np.var(x_t, ddof=1) + np.var(x_c, ddof=1)) / 2.0))
        if sd == 0:
            continue
        slack = constraint.max_abs_std_diff * sd
        rows.append(np.concatenate([x_t - slack, -x_c]))
        rows.append(np.concatenate([-x_t - slack, x_c]))
        lower += [-np.inf, -np.inf]
        upper += [0.0, 0.0]

    objective = np.concatenate([-np.ones(n_t), np.zeros(n_c)])
    result = milp(
        objective,
        constraints=LinearConstraint(np.vstack(rows), lower, upper),
        integrality=np.ones(n_t + n_c),
        bounds=Bounds(0, 1),
        options={"time_limit": solver.time_limit, "disp": False},
    )
    flags: tuple[str, ...] = ()
    if result.status == 1 and result.x is not None:
        flags = ("time_limited",)
        warnings.warn(
            f"Cardinality matching hit the {solver.time_limit}s time limit; "
            "returning the best incumbent",
            NumericalWarning,
            stacklevel=2,
        )
    elif result.status != 0 or result.x is None:
        raise Infeasible(f"No subsets satisfy the balance constraints ({result.message})")

    chosen = np.round(result.x).astype(bool)
    sel_t, sel_c = t_idx[chosen[:n_t]], c_idx[chosen[n_t:]]
    logger.info("cardinality matching kept %d of %d treated", sel_t.size, n_t)

    x, _ = d.design(include_centers=include_centers)
    cov = pooled_covariance(x[t_idx], x[c_idx])
    values, _ = mahalanobis_distances(x[sel_t], x[sel_c], cov)
    pairing = optimal_pair_match(
        DistanceMatrix(values, d.ids[sel_t], d.ids[sel_c])
    )
    selected = set(d.ids[sel_t].tolist())
    unmatched = tuple(int(uid) for uid in d.ids[t_idx] if int(uid) not in selected)
    return MatchResult(
        pairs=pairing.pairs,
        distances=pairing.distances,
        unmatched_treated=tuple(sorted(set(unmatched) | set(pairing.unmatched_treated))),
        objective=pairing.objective,
        flags=flags,
    )


def match_outcomes(
    match: MatchResult, d: Dataset, outcome: str | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Outcomes of the treated and control member of every pair."""
    y = d.outcome(outcome)
    treated = d.positions([t for t, _ in match.pairs])
    controls = d.positions([c for _, c in match.pairs])
    return y[treated], y[controls]


def matched_sample(match: MatchResult, d: Dataset) -> Dataset:
    ids = [uid for pair in match.pairs for uid in pair]
    return d.subset(np.sort(d.positions(ids)))


def matched_pair_estimate(
    y_treated: Sequence[float] | np.ndarray,
    y_control: Sequence[float] | np.ndarray,
    method_id: str = "matched_pairs",
    outcome: str = "",
) -> EffectEstimate:
    """Mean pair difference; se = sd(differences) / sqrt(#pairs).

    Raises:
        TooFewPairs: Fewer than 2 pairs
    """
    diffs = np.asarray(y_treated, dtype=float) - np.asarray(y_control, dtype=float)
    if diffs.size < 2:
        raise TooFewPairs(f"Need at least 2 matched pairs, got {diffs.size}")
    se = float(diffs.std(ddof=1) / np.sqrt(diffs.size))
    return EffectEstimate.normal(
        method_id, Estimand.ATT, float(diffs.mean()), se, 2 * diffs.size, outcome=outcome
    )


def bias_corrected_estimate(
    match: MatchResult,
    d: Dataset,
    outcome: str | None = None,
    include_centers: bool = True,
    method_id: str = "matched_pairs+ra",
) -> EffectEstimate:
    """Regression of y on (z, X) over the matched sample; z coefficient with HC2 se.

    Covariate columns that are constant within the matched sample are dropped.

    Raises:
        TooFewUnits: Matched sample too small for the covariate count
        RankDeficient: z is collinear with the covariates
    """
    sample = matched_sample(match, d)
    x, names = sample.design(include_centers=include_centers)
    varying = [name for j, name in enumerate(names) if np.ptp(x[:, j]) > 0]
    if sample.n <= len(varying) + 2:
        raise TooFewUnits(
            f"Matched sample of {sample.n} units is too small for {len(varying)} covariates"
        )
    trimmed = Dataset.from_arrays(
        sample.design(columns=varying)[0] if varying else np.empty((sample.n, 0)),
        sample.z,
        dict(sample.y),
        ids=sample.ids,
    )
    return treatment_coefficient(
        trimmed,
        outcome,
        method_id=method_id,
        estimand=Estimand.ATT,
    ).with_flags(*match.flags)


@dataclass(frozen=True)
class MatchAudit:
    rows: tuple[BalanceRow, ...]
    max_abs_std_diff: float
    caliper_ok: bool
    constraints_ok: bool


def audit_match(
    match: MatchResult,
    d: Dataset,
    constraints: Sequence[BalanceConstraint] = (),
    policy: DenominatorPolicy = DenominatorPolicy.POOLED_SD,
    include_centers: bool = False,
    tolerance: float = 1e-7,
    e: np.ndarray | None = None,
    caliper: Caliper | None = None,
) -> MatchAudit:
    """Post-match balance with unweighted full-sample denominators.

    ``caliper_ok`` recomputes every pair's logit-propensity gap from ``e`` and
    compares it with the caliper; without a caliper it is trivially true.
    """
    weights = np.zeros(d.n)
    weights[d.positions([uid for pair in match.pairs for uid in pair])] = 1.0
    all_rows = balance_table(d, weights=weights, policy=policy, include_centers=True)
    _, shown = d.design(include_centers=include_centers)
    rows = [r for r in all_rows if r.covariate in shown]
    by_name = {r.covariate: r for r in all_rows}
    constraints_ok = all(
        by_name[c.covariate].undefined
        or abs(by_name[c.covariate].std_diff) <= c.max_abs_std_diff + tolerance
        for c in constraints
    )
    return MatchAudit(
        rows=tuple(rows),
        max_abs_std_diff=max_abs_std_diff(rows),
        caliper_ok=_within_caliper(match, d, e, caliper, tolerance),
        constraints_ok=constraints_ok,
    )


def _within_caliper(
    match: MatchResult,
    d: Dataset,
    e: np.ndarray | None,
    caliper: Caliper | None,
    tolerance: float,
) -> bool:
    if caliper is None or not match.pairs:
        return True
    if e is None:
        raise ValueError("Checking a caliper needs propensity scores")
    lin = logit(np.asarray(e, dtype=float))
    treated = d.positions([t for t, _ in match.pairs])
    controls = d.positions([c for _, c in match.pairs])
    gaps = np.abs(lin[treated] - lin[controls])
    return bool((gaps <= caliper_threshold(e, caliper) + tolerance).all())
