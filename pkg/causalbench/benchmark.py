"""RCT benchmarking: score observational estimates against the trial's ITT effect.

For each configured method and outcome the harness computes the standardized
bias (tau_rct - tau_obs) / SD(RCT control outcomes), a percentile bootstrap
interval for it, the MSE-style score (interval length + bias^2) and a verdict.
"""

from __future__ import annotations

import logging
import os
import subprocess
import tempfile
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from causalbench.__version__ import __version__
from causalbench.balance import DenominatorPolicy
from causalbench.config import MethodConfig, PluginConfig, RunConfig, settings_hash
from causalbench.data_model import Dataset, write_csv
from causalbench.effect import EffectEstimate, Estimand
from causalbench.errors import (
    CausalBenchError,
    DegenerateArm,
    MethodFailure,
    NonzeroExit,
    ParseError,
    ZeroDenominator,
)
from causalbench.methods import APPROACH_ORDER, Approach, MethodOutput, resolve, run_method

__all__ = [
    "Approach",
    "BenchmarkReport",
    "BenchmarkRow",
    "BiasInterval",
    "EffectEstimate",
    "RctBenchmark",
    "Verdict",
    "bias_ci",
    "external_estimator_plugin",
    "mse_metric",
    "rct_itt_estimate",
    "run_benchmark",
    "standardized_bias",
    "with_policy",
]

logger = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.05


class Verdict(str, Enum):
    OK = "ok"
    BIASED = "BIASED"


@dataclass(frozen=True)
class RctBenchmark:
    estimate: EffectEstimate
    sd_control: float


def rct_itt_estimate(rct: Dataset, outcome: str | None = None) -> RctBenchmark:
    """Difference in means by assigned arm with a Welch standard error.

    Also returns the sd of the control-group outcomes, the denominator of the
    standardized bias.

    Raises:
        DegenerateArm: An assignment group has fewer than 2 units
    """
    y = rct.outcome(outcome)
    assigned = rct.treated
    for label, mask in (("treated", assigned), ("control", ~assigned)):
        if mask.sum() < 2:
            raise DegenerateArm(f"RCT {label} group has {int(mask.sum())} units")
    y_t, y_c = y[assigned], y[~assigned]
    tau = float(y_t.mean() - y_c.mean())
    se = float(np.sqrt(y_t.var(ddof=1) / y_t.size + y_c.var(ddof=1) / y_c.size))
    estimate = EffectEstimate.normal(
        "rct_itt", Estimand.ATE, tau, se, rct.n, outcome=outcome or rct.outcome_names[0]
    )
    return RctBenchmark(estimate, float(y_c.std(ddof=1)))


def standardized_bias(tau_rct: float, tau_obs: float, sd_rct_control: float) -> float:
    """(tau_rct - tau_obs) / sd_rct_control.

    Raises:
        ZeroDenominator: sd_rct_control is not positive
    """
    if not sd_rct_control > 0:
        raise ZeroDenominator(f"RCT control sd must be positive, got {sd_rct_control}")
    return (tau_rct - tau_obs) / sd_rct_control


def mse_metric(bias_std: float, ci: tuple[float, float]) -> float:
    """Interval length plus squared bias, as the benchmark defines it."""
    lo, hi = ci
    if hi < lo:
        raise ValueError(f"Interval ({lo}, {hi}) is reversed")
    return (hi - lo) + bias_std**2


def external_estimator_plugin(
    plugin: PluginConfig,
    nrs: Dataset,
    method_id: str,
    outcome: str | None = None,
    estimand: Estimand = Estimand.ATE,
    seed: int = 0,
) -> EffectEstimate:
    """Run an external estimator on a CSV dump of ``nrs``.

    The child receives the CSV path as its last argument, plus the outcome,
    estimand and seed in ``CAUSAL_BENCH_*`` environment variables, and must
    print ``tau,se`` on its last line of standard output.

    Raises:
        NonzeroExit: The process failed or timed out
        ParseError: The output is not two finite numbers with se >= 0
    """
    outcome = outcome or nrs.outcome_names[0]
    env = {
        **os.environ,
        "CAUSAL_BENCH_OUTCOME": outcome,
        "CAUSAL_BENCH_ESTIMAND": Estimand.parse(estimand).value,
        "CAUSAL_BENCH_SEED": str(seed),
    }
    with tempfile.TemporaryDirectory(prefix="causalbench-") as tmp:
        path = Path(tmp) / "nrs.csv"
        write_csv(nrs, path)
        try:
            completed = subprocess.run(  # noqa: S603
                [*plugin.command, str(path)],
                capture_output=True,
                text=True,
                timeout=plugin.timeout,
                env=env,
                check=False,
            )
        except subprocess.TimeoutExpired:
            raise NonzeroExit(
                f"plugin '{plugin.name}' timed out after {plugin.timeout}s"
            ) from None
        except OSError as e:
            raise NonzeroExit(f"plugin '{plugin.name}' could not start: {e}") from None
    if completed.returncode != 0:
        tail = completed.stderr.strip().splitlines()[-1:] or [""]
        raise NonzeroExit(
            f"plugin '{plugin.name}' exited with {completed.returncode}: {tail[0]}"
        )
    lines = [line.strip() for line in completed.stdout.splitlines() if line.strip()]
    try:
        tau_text, se_text = lines[-1].split(",")
        tau, se = float(tau_text), float(se_text)
    except (IndexError, ValueError):
        raise ParseError(
            f"plugin '{plugin.name}' printed {completed.stdout.strip()[:80]!r}, "
            "expected 'tau,se'"
        ) from None
    if not (np.isfinite(tau) and np.isfinite(se) and se >= 0):
        raise ParseError(f"plugin '{plugin.name}' printed invalid values {tau},{se}")
    return EffectEstimate.normal(method_id, Estimand.parse(estimand), tau, se, nrs.n, outcome)


def _run_configured(
    mc: MethodConfig,
    d: Dataset,
    outcome: str,
    seed: int,
    point_only: bool,
    plugins: Mapping[str, PluginConfig],
) -> MethodOutput:
    if mc.is_plugin:
        estimate = external_estimator_plugin(
            plugins[mc.plugin_name], d, mc.method_id, outcome, mc.estimand, seed
        )
        return MethodOutput(estimate)
    return run_method(
        mc.method, d, outcome, mc.settings, mc.estimand, seed, point_only, mc.method_id
    )


def _approach(mc: MethodConfig, plugins: Mapping[str, PluginConfig]) -> Approach:
    if mc.approach is not None:
        return mc.approach
    if mc.is_plugin:
        return plugins[mc.plugin_name].approach
    return resolve(mc.method, mc.settings).approach


def _resample(d: Dataset, rng: np.random.Generator) -> Dataset:
    """Bootstrap draw within each (arm, assignment) cell."""
    parts = []
    for arm in np.unique(d.arms):
        for z in (0, 1):
            cell = np.flatnonzero((d.arms == arm) & (d.z == z))
            if cell.size:
                parts.append(rng.choice(cell, size=cell.size, replace=True))
    return d.take(np.concatenate(parts))


def _replicate(
    mc: MethodConfig,
    rct: Dataset,
    nrs: Dataset,
    outcome: str,
    seq: np.random.SeedSequence,
    plugins: Mapping[str, PluginConfig],
) -> float | None:
    rng = np.random.default_rng(seq)
    method_seed = int(seq.generate_state(1)[0])
    try:
        benchmark = rct_itt_estimate(_resample(rct, rng), outcome)
        observed = _run_configured(mc, _resample(nrs, rng), outcome, method_seed, True, plugins)
        return standardized_bias(
            benchmark.estimate.tau, observed.estimate.tau, benchmark.sd_control
        )
    except (CausalBenchError, ValueError, np.linalg.LinAlgError) as e:
        logger.debug("replicate failed for %s: %s", mc.method_id, e)
        return None


@dataclass(frozen=True)
class BiasInterval:
    lo: float
    hi: float
    replicates: int
    failures: int

    @property
    def failure_rate(self) -> float:
        return self.failures / self.replicates if self.replicates else 0.0

    @property
    def flagged(self) -> bool:
        return self.failure_rate > MAX_FAILURE_RATE


def bias_ci(
    method: MethodConfig | str,
    rct: Dataset,
    nrs: Dataset,
    B: int = 1000,  # noqa: N803
    seed: int = 0,
    outcome: str | None = None,
    jobs: int = 1,
    plugins: Mapping[str, PluginConfig] | None = None,
) -> BiasInterval:
    """Percentile bootstrap interval of the standardized bias.

    Each replicate resamples both arms within assignment groups, recomputes
    the RCT benchmark and its control sd, and reruns the full method with a
    replicate-derived seed. Replicates are reduced in index order, so the
    interval does not depend on ``jobs``.

    Raises:
        MethodFailure: Every replicate failed
    """
    mc = method if isinstance(method, MethodConfig) else MethodConfig(method)
    outcome = outcome or rct.outcome_names[0]
    children = np.random.SeedSequence(seed).spawn(B)
    draws = Parallel(n_jobs=jobs)(
        delayed(_replicate)(mc, rct, nrs, outcome, child, plugins or {}) for child in children
    )
    values = np.array([v for v in draws if v is not None])
    failures = B - values.size
    if values.size == 0:
        raise MethodFailure(f"{mc.method_id}: all {B} bootstrap replicates failed")
    lo, hi = np.percentile(values, [2.5, 97.5])
    if failures:
        logger.info("%s: %d of %d replicates failed", mc.method_id, failures, B)
    return BiasInterval(float(lo), float(hi), B, failures)


@dataclass(frozen=True)
class BenchmarkRow:
    """One (method, outcome) result; numeric fields are None when the method failed."""

    method_id: str
    outcome: str
    approach: Approach
    estimand: Estimand
    std_bias: float | None
    std_bias_ci: tuple[float, float] | None
    mse: float | None
    verdict: Verdict | None
    estimate: EffectEstimate | None
    rct: EffectEstimate
    sd_rct_control: float
    settings_hash: str
    seed: int
    failures: int = 0
    flags: tuple[str, ...] = field(default_factory=tuple)
    max_abs_std_diff_after: float | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.std_bias_ci is not None and self.verdict is not None:
            lo, hi = self.std_bias_ci
            expected = Verdict.OK if lo <= 0 <= hi else Verdict.BIASED
            if self.verdict is not expected:
                raise ValueError(f"{self.method_id}: verdict disagrees with its interval")

    def to_dict(self) -> dict[str, Any]:
        return {
            "method_id": self.method_id,
            "outcome": self.outcome,
            "approach": self.approach.value,
            "estimand": self.estimand.value,
            "std_bias": self.std_bias,
            "std_bias_ci": None if self.std_bias_ci is None else list(self.std_bias_ci),
            "mse": self.mse,
            "verdict": None if self.verdict is None else self.verdict.value,
            "estimate": None if self.estimate is None else self.estimate.to_dict(),
            "rct": self.rct.to_dict(),
            "sd_rct_control": self.sd_rct_control,
            "settings_hash": self.settings_hash,
            "seed": self.seed,
            "failures": self.failures,
            "flags": list(self.flags),
            "max_abs_std_diff_after": self.max_abs_std_diff_after,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BenchmarkRow:
        def estimate(raw: Mapping[str, Any] | None) -> EffectEstimate | None:
            if raw is None:
                return None
            return EffectEstimate(
                method_id=raw["method_id"],
                estimand=Estimand.parse(raw["estimand"]),
                tau=raw["tau"],
                se=raw["se"],
                ci=tuple(raw["ci"]),  # type: ignore[arg-type]
                n_used=raw["n_used"],
                outcome=raw.get("outcome", ""),
                flags=tuple(raw.get("flags", ())),
            )

        rct = estimate(data["rct"])
        assert rct is not None
        ci = data.get("std_bias_ci")
        return cls(
            method_id=data["method_id"],
            outcome=data["outcome"],
            approach=Approach(data["approach"]),
            estimand=Estimand.parse(data["estimand"]),
            std_bias=data.get("std_bias"),
            std_bias_ci=None if ci is None else (float(ci[0]), float(ci[1])),
            mse=data.get("mse"),
            verdict=None if data.get("verdict") is None else Verdict(data["verdict"]),
            estimate=estimate(data.get("estimate")),
            rct=rct,
            sd_rct_control=data["sd_rct_control"],
            settings_hash=data["settings_hash"],
            seed=data["seed"],
            failures=data.get("failures", 0),
            flags=tuple(data.get("flags", ())),
            max_abs_std_diff_after=data.get("max_abs_std_diff_after"),
            error=data.get("error"),
        )


@dataclass(frozen=True)
class BenchmarkReport:
    meta: Mapping[str, Any]
    rows: tuple[BenchmarkRow, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"meta": dict(self.meta), "rows": [r.to_dict() for r in self.rows]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BenchmarkReport:
        try:
            return cls(dict(data["meta"]), tuple(BenchmarkRow.from_dict(r) for r in data["rows"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Malformed results file: {e}") from None

    @property
    def outcomes(self) -> list[str]:
        return list(dict.fromkeys(r.outcome for r in self.rows))


def with_policy(mc: MethodConfig, policy: DenominatorPolicy) -> MethodConfig:
    """Copy of ``mc`` whose built-in method audits balance under ``policy``.

    A policy set in the method's own settings wins; plugins are left alone.
    """
    if mc.is_plugin or "denominator_policy" in mc.settings:
        return mc
    return replace(mc, settings={**mc.settings, "denominator_policy": policy.value})


def _method_seed(master: int, index: int, mc: MethodConfig) -> int:
    if mc.seed is not None:
        return mc.seed
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _score_method(
    mc: MethodConfig,
    index: int,
    rct: Dataset,
    nrs: Dataset,
    outcome: str,
    config: RunConfig,
    benchmark: RctBenchmark,
    jobs: int,
) -> BenchmarkRow:
    seed = _method_seed(config.bootstrap.seed, index, mc)
    base = {
        "method_id": mc.method_id,
        "outcome": outcome,
        "approach": _approach(mc, config.plugins),
        "estimand": mc.estimand,
        "rct": benchmark.estimate,
        "sd_rct_control": benchmark.sd_control,
        "settings_hash": settings_hash(mc.to_dict()),
        "seed": seed,
    }
    run = with_policy(mc, config.denominator_policy)
    try:
        output = _run_configured(run, nrs, outcome, seed, False, config.plugins)
        bias = standardized_bias(
            benchmark.estimate.tau, output.estimate.tau, benchmark.sd_control
        )
        interval = bias_ci(
            run,
            rct,
            nrs,
            config.bootstrap.B,
            seed,
            outcome,
            jobs=min(jobs, config.plugin_jobs) if mc.is_plugin else jobs,
            plugins=config.plugins,
        )
    except (CausalBenchError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning("%s on %s failed: %s", mc.method_id, outcome, e)
        code = e.code if isinstance(e, CausalBenchError) else MethodFailure.code
        return BenchmarkRow(
            std_bias=None,
            std_bias_ci=None,
            mse=None,
            verdict=None,
            estimate=None,
            error=f"{code} {e}",
            **base,
        )
    ci = (interval.lo, interval.hi)
    flags = output.estimate.flags
    if interval.flagged:
        flags = (*flags, "bootstrap_failure_rate")
    return BenchmarkRow(
        std_bias=bias,
        std_bias_ci=ci,
        mse=mse_metric(bias, ci),
        verdict=Verdict.OK if ci[0] <= 0 <= ci[1] else Verdict.BIASED,
        estimate=output.estimate,
        failures=interval.failures,
        flags=flags,
        max_abs_std_diff_after=None if output.audit is None else output.audit.max_abs_std_diff,
        **base,
    )


def run_benchmark(
    config: RunConfig,
    rct: Dataset,
    nrs: Dataset,
    jobs: int = 1,
    progress: bool = False,
) -> BenchmarkReport:
    """Score every configured method on every outcome.

    Rows are grouped by approach panel, then by configuration order, then by
    outcome. A failing method yields a row carrying its error and the run
    continues.
    """
    outcomes = list(config.outcomes or rct.outcome_names)
    benchmarks = {outcome: rct_itt_estimate(rct, outcome) for outcome in outcomes}
    tasks = [(i, mc, outcome) for i, mc in enumerate(config.methods) for outcome in outcomes]
    rows = [
        _score_method(mc, i, rct, nrs, outcome, config, benchmarks[outcome], jobs)
        for i, mc, outcome in tqdm(
            tasks, desc="methods", unit="row", disable=not progress, leave=False
        )
    ]
    order = {mc.method_id: i for i, mc in enumerate(config.methods)}
    rows.sort(
        key=lambda r: (APPROACH_ORDER.index(r.approach), order[r.method_id], outcomes.index(r.outcome))
    )
    meta = {
        "seed": config.bootstrap.seed,
        "B": config.bootstrap.B,
        "version": __version__,
        "config_hash": settings_hash(config.to_dict()),
        "outcomes": outcomes,
        "n_rct": rct.n,
        "n_nrs": nrs.n,
    }
    return BenchmarkReport(meta, tuple(rows))


def plot_frame(report: BenchmarkReport) -> pd.DataFrame:
    """One line per row: bias, interval, MSE and verdict, ready for plotting."""
    return pd.DataFrame(
        [
            {
                "method_id": r.method_id,
                "outcome": r.outcome,
                "approach": r.approach.value,
                "std_bias": r.std_bias,
                "lo": None if r.std_bias_ci is None else r.std_bias_ci[0],
                "hi": None if r.std_bias_ci is None else r.std_bias_ci[1],
                "mse": r.mse,
                "verdict": None if r.verdict is None else r.verdict.value,
            }
            for r in report.rows
        ],
        columns=["method_id", "outcome", "approach", "std_bias", "lo", "hi", "mse", "verdict"],
    )


def _pivot(report: BenchmarkReport, value: str) -> pd.DataFrame:
    # report rows are already in panel/method order; keep it
    cells: dict[tuple[str, str], dict[str, Any]] = {}
    for record in plot_frame(report).to_dict("records"):
        key = (record["approach"], record["method_id"])
        cells.setdefault(key, {})[record["outcome"]] = record[value]
    return pd.DataFrame(
        [
            {"approach": approach, "method_id": method_id, **{o: row.get(o) for o in report.outcomes}}
            for (approach, method_id), row in cells.items()
        ],
        columns=["approach", "method_id", *report.outcomes],
    )


def mse_table(report: BenchmarkReport) -> pd.DataFrame:
    """MSE per method (rows) and outcome (columns)."""
    return _pivot(report, "mse")


def verdict_table(report: BenchmarkReport) -> pd.DataFrame:
    """Verdict per method and outcome, grouped by approach panel."""
    table = _pivot(report, "verdict")
    return table.fillna("failed")


def row_frame(report: BenchmarkReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                **{k: v for k, v in r.to_dict().items() if k not in ("estimate", "rct")},
                "tau_obs": None if r.estimate is None else r.estimate.tau,
                "se_obs": None if r.estimate is None else r.estimate.se,
                "tau_rct": r.rct.tau,
            }
            for r in report.rows
        ]
    )


def summarize_verdicts(rows: Sequence[BenchmarkRow]) -> dict[str, int]:
    counts = {v.value: 0 for v in Verdict}
    for r in rows:
        if r.verdict is not None:
            counts[r.verdict.value] += 1
    return counts
