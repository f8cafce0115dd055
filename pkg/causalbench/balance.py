"""Covariate balance: standardized differences, Welch p-values, balance tables."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats
from statsmodels.stats.weightstats import DescrStatsW
from statsmodels.stats.weightstats import ttest_ind as weighted_ttest_ind

from causalbench.data_model import Dataset
from causalbench.errors import DegenerateVariance, TooFewUnits, ZeroDenominator


class DenominatorPolicy(str, Enum):
    POOLED_SD = "pooled_sd"
    CONTROL_SD = "control_sd"


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    mean_t: float
    mean_c: float
    std_diff: float
    p_value: float
    policy: DenominatorPolicy = DenominatorPolicy.POOLED_SD
    undefined: bool = False

    def to_dict(self) -> dict[str, object]:
        data = asdict(self)
        data["policy"] = self.policy.value
        return data


@dataclass(frozen=True)
class ArmComparisonRow:
    covariate: str
    rct_std_diff: float
    rct_p_value: float
    nrs_std_diff: float
    nrs_p_value: float


def _as_array(values: Sequence[float] | np.ndarray, label: str) -> np.ndarray:
    array = np.asarray(values, dtype=float).ravel()
    if array.size < 2:
        raise TooFewUnits(f"{label} group needs at least 2 values, got {array.size}")
    return array


def _denominator(
    x_t: np.ndarray, x_c: np.ndarray, policy: DenominatorPolicy
) -> float:
    if policy is DenominatorPolicy.CONTROL_SD:
        return float(np.std(x_c, ddof=1))
    return float(np.sqrt((np.var(x_t, ddof=1) + np.var(x_c, ddof=1)) / 2.0))


def standardized_difference(
    x_t: Sequence[float] | np.ndarray,
    x_c: Sequence[float] | np.ndarray,
    policy: DenominatorPolicy = DenominatorPolicy.POOLED_SD,
) -> float:
    """Difference in means divided by the policy's standard deviation.

    The pooled denominator is sqrt((s_t^2 + s_c^2) / 2) with sample (n-1)
    variances; the control policy uses the control group's sd.

    Raises:
        TooFewUnits: Either group has fewer than 2 values
        ZeroDenominator: The chosen standard deviation is 0
    """
    x_t = _as_array(x_t, "Treated")
    x_c = _as_array(x_c, "Control")
    denominator = _denominator(x_t, x_c, DenominatorPolicy(policy))
    if denominator == 0:
        raise ZeroDenominator(f"{DenominatorPolicy(policy).value} is zero")
    return float((x_t.mean() - x_c.mean()) / denominator)


def welch_p_value(
    x_t: Sequence[float] | np.ndarray, x_c: Sequence[float] | np.ndarray
) -> float:
    """Two-sided p-value of Welch's unequal-variance t test.

    Two constant groups with the same value give p = 1.0.

    Raises:
        DegenerateVariance: Both groups are constant at different values
    """
    x_t = _as_array(x_t, "Treated")
    x_c = _as_array(x_c, "Control")
    if np.ptp(x_t) == 0 and np.ptp(x_c) == 0:
        if x_t[0] == x_c[0]:
            return 1.0
        raise DegenerateVariance(
            f"Both groups are constant ({x_t[0]} vs {x_c[0]}); t statistic undefined"
        )
    result = stats.ttest_ind(x_t, x_c, equal_var=False)
    return float(np.clip(result.pvalue, 0.0, 1.0))


def _frequency_weights(w: np.ndarray) -> np.ndarray:
    # rescale so the group's weights sum to its count of weighted units
    positive = w > 0
    return w * positive.sum() / w.sum()


def _weighted_p_value(
    x_t: np.ndarray, w_t: np.ndarray, x_c: np.ndarray, w_c: np.ndarray
) -> float:
    keep_t, keep_c = w_t > 0, w_c > 0
    x_t, w_t, x_c, w_c = x_t[keep_t], w_t[keep_t], x_c[keep_c], w_c[keep_c]
    stats_t = DescrStatsW(x_t, weights=w_t, ddof=1)
    stats_c = DescrStatsW(x_c, weights=w_c, ddof=1)
    degenerate = x_t.size < 2 or x_c.size < 2 or (np.ptp(x_t) == 0 and np.ptp(x_c) == 0)
    if degenerate:
        return 1.0 if np.isclose(stats_t.mean, stats_c.mean) else 0.0
    _, p_value, _ = weighted_ttest_ind(
        x_t, x_c, usevar="unequal", weights=(w_t, w_c)
    )
    return float(np.clip(p_value, 0.0, 1.0))


def balance_table(
    d: Dataset,
    weights: Sequence[float] | np.ndarray | None = None,
    policy: DenominatorPolicy = DenominatorPolicy.POOLED_SD,
    include_centers: bool = True,
) -> list[BalanceRow]:
    """One balance row per covariate column.

    With ``weights`` the means and the Welch test use frequency-weight
    semantics; the std. diff. denominator always comes from the unweighted
    data so tables before and after adjustment stay comparable.
    """
    policy = DenominatorPolicy(policy)
    treated = d.treated
    d.require_groups(min_per_group=2)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (d.n,):
            raise ValueError(f"Expected {d.n} weights, got {w.shape}")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ValueError("Weights must be finite and nonnegative")
        if w[treated].sum() <= 0 or w[~treated].sum() <= 0:
            raise TooFewUnits("Weights put no mass on one treatment group")
        w_t = _frequency_weights(w[treated])
        w_c = _frequency_weights(w[~treated])

    x, names = d.design(include_centers=include_centers)
    rows = []
    for j, name in enumerate(names):
        x_t, x_c = x[treated, j], x[~treated, j]
        denominator = _denominator(x_t, x_c, policy)
        if weights is None:
            mean_t, mean_c = float(x_t.mean()), float(x_c.mean())
            try:
                p_value = welch_p_value(x_t, x_c)
            except DegenerateVariance:
                p_value = 0.0
        else:
            mean_t = float(np.average(x_t, weights=w_t))
            mean_c = float(np.average(x_c, weights=w_c))
            p_value = _weighted_p_value(x_t, w_t, x_c, w_c)
        undefined = denominator == 0
        std_diff = float("nan") if undefined else (mean_t - mean_c) / denominator
        rows.append(
            BalanceRow(name, mean_t, mean_c, float(std_diff), p_value, policy, undefined)
        )
    return rows


def compare_arms(
    rct: Dataset,
    nrs: Dataset,
    policy: DenominatorPolicy = DenominatorPolicy.CONTROL_SD,
    include_centers: bool = False,
) -> list[ArmComparisonRow]:
    """Std. diff. and p-value per covariate in the RCT and in the NRS, side by side."""
    rct_rows = balance_table(rct, policy=policy, include_centers=include_centers)
    nrs_rows = balance_table(nrs, policy=policy, include_centers=include_centers)
    return [
        ArmComparisonRow(r.covariate, r.std_diff, r.p_value, o.std_diff, o.p_value)
        for r, o in zip(rct_rows, nrs_rows, strict=True)
    ]


def max_abs_std_diff(rows: Sequence[BalanceRow]) -> float:
    values = [abs(r.std_diff) for r in rows if not r.undefined]
    return max(values) if values else 0.0


def balance_frame(rows: Sequence[BalanceRow]) -> pd.DataFrame:
    """Rows shaped like the study's balance table (treated/control mean, std diff, p)."""
    return pd.DataFrame(
        {
            "covariate": [r.covariate for r in rows],
            "treated_mean": [r.mean_t for r in rows],
            "control_mean": [r.mean_c for r in rows],
            "std_diff": [r.std_diff for r in rows],
            "p_value": [r.p_value for r in rows],
            "policy": [r.policy.value for r in rows],
        }
    )


def comparison_frame(rows: Sequence[ArmComparisonRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows])
