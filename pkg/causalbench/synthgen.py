"""Seeded two-arm study generator with known potential outcomes.

The RCT arm assigns treatment by a fair coin; the NRS arm self-selects through
a logistic model on standardized covariates, optionally driven by an
unobserved confounder ``u``. Selection coefficients can be calibrated so the
NRS arm reproduces target standardized differences.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from causalbench.balance import DenominatorPolicy
from causalbench.config import atomic_write_json, cache_dir, settings_hash
from causalbench.data_model import (
    Arm,
    CovariateKind,
    CovariateRole,
    CovariateSchema,
    Dataset,
    Unit,
)
from causalbench.errors import MissingColumn, Unachievable

logger = logging.getLogger(__name__)

BRACKET = 8.0
CALIBRATION_N = 100_000
CALIBRATION_SEED = 20_170_101
TRUTH_CHUNK = 100_000
MIN_ARM_SIZE = 20


@dataclass(frozen=True)
class CovariateMoment:
    """Population distribution of one covariate.

    Continuous covariates are normal(mean, sd); binary ones Bernoulli(p);
    categorical ones draw ``levels`` with probabilities ``probs``.
    """

    name: str
    mean: float = 0.0
    sd: float = 1.0
    p: float | None = None
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()
    role: CovariateRole = CovariateRole.COVARIATE

    def __post_init__(self) -> None:
        if self.levels:
            if len(self.levels) != len(self.probs):
                raise ValueError(f"{self.name}: one probability per level is required")
            if not math.isclose(sum(self.probs), 1.0, abs_tol=1e-9) or min(self.probs) <= 0:
                raise ValueError(f"{self.name}: level probabilities must be positive and sum to 1")
        elif self.p is not None:
            if not 0 < self.p < 1:
                raise ValueError(f"{self.name}: p must lie in (0, 1)")
        elif not self.sd > 0:
            raise ValueError(f"{self.name}: sd must be positive")

    @property
    def kind(self) -> CovariateKind:
        if self.levels:
            return CovariateKind.CATEGORICAL
        if self.p is not None:
            return CovariateKind.BINARY
        return CovariateKind.CONTINUOUS

    def schema(self) -> CovariateSchema:
        return CovariateSchema(self.name, self.kind, self.role, tuple(self.levels))

    def column_moments(self) -> list[tuple[str, float, float]]:
        """(design column, population mean, population sd) per design column."""
        if self.kind is CovariateKind.CONTINUOUS:
            return [(self.name, self.mean, self.sd)]
        if self.kind is CovariateKind.BINARY:
            assert self.p is not None
            return [(self.name, self.p, math.sqrt(self.p * (1 - self.p)))]
        prob = dict(zip(self.levels, self.probs, strict=True))
        return [
            (col.name, prob[col.level], math.sqrt(prob[col.level] * (1 - prob[col.level])))
            for col in self.schema().design_columns()
            if col.level is not None
        ]

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind is CovariateKind.CONTINUOUS:
            return rng.normal(self.mean, self.sd, size=(n, 1))
        if self.kind is CovariateKind.BINARY:
            return (rng.random(size=(n, 1)) < self.p).astype(float)
        labels = rng.choice(np.asarray(self.levels), size=n, p=np.asarray(self.probs))
        levels = self.schema().levels[1:]
        return np.column_stack([(labels == level).astype(float) for level in levels])


@dataclass(frozen=True)
class OutcomeSpec:
    """Potential-outcome model on standardized covariates s.

    y0 = intercept + sum(baseline * s) [+ quadratic terms] + u_strength * noise_sd * u + e
    y1 = y0 + treatment_effect + sum(interactions * s)
    """

    name: str
    intercept: float = 0.0
    baseline: Mapping[str, float] = field(default_factory=dict)
    treatment_effect: float = 0.0
    interactions: Mapping[str, float] = field(default_factory=dict)
    nonlinear: bool = False
    noise_sd: float = 1.0

    def __post_init__(self) -> None:
        if self.noise_sd < 0:
            raise ValueError(f"{self.name}: noise_sd must be nonnegative")


@dataclass(frozen=True)
class DgpConfig:
    covariates: tuple[CovariateMoment, ...]
    outcomes: tuple[OutcomeSpec, ...]
    selection_coefs: Mapping[str, float] = field(default_factory=dict)
    treated_share: float = 0.5
    n_rct: int = 357
    n_nrs: int = 453
    u_strength: float = 0.0
    seed: int = 0
    truth_draws: int = 1_000_000

    def __post_init__(self) -> None:
        if self.n_rct < MIN_ARM_SIZE or self.n_nrs < MIN_ARM_SIZE:
            raise ValueError(f"Each arm needs at least {MIN_ARM_SIZE} units")
        if self.u_strength < 0:
            raise ValueError("u_strength must be nonnegative")
        if not 0 < self.treated_share < 1:
            raise ValueError("treated_share must lie in (0, 1)")
        if not self.outcomes:
            raise ValueError("At least one outcome is required")
        columns = set(self.column_names)
        for label, coefs in [("selection", self.selection_coefs)] + [
            (o.name, {**o.baseline, **o.interactions}) for o in self.outcomes
        ]:
            unknown = set(coefs) - columns
            if unknown:
                raise MissingColumn(f"{label} coefficients name unknown columns: {sorted(unknown)}")

    @property
    def schema(self) -> tuple[CovariateSchema, ...]:
        return tuple(c.schema() for c in self.covariates)

    @property
    def column_moments(self) -> list[tuple[str, float, float]]:
        return [m for c in self.covariates for m in c.column_moments()]

    @property
    def column_names(self) -> list[str]:
        return [name for name, _, _ in self.column_moments]

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for cov in data["covariates"]:
            cov["role"] = CovariateRole(cov["role"]).value
        return data


@dataclass(frozen=True)
class SynthUnit:
    unit: Unit
    y1: Mapping[str, float]
    y0: Mapping[str, float]


@dataclass(frozen=True, eq=False)
class SyntheticStudy:
    rct: Dataset
    nrs: Dataset
    truth: Mapping[str, Mapping[str, float]]
    potential: Mapping[str, Mapping[str, tuple[np.ndarray, np.ndarray]]]

    def synth_units(self, arm: Arm | str) -> Iterator[SynthUnit]:
        d = self.rct if Arm(arm) is Arm.RCT else self.nrs
        pots = self.potential[Arm(arm).value]
        for i, unit in enumerate(d.iter_units()):
            yield SynthUnit(
                unit,
                {name: float(y1[i]) for name, (y1, _) in pots.items()},
                {name: float(y0[i]) for name, (_, y0) in pots.items()},
            )


def _draw_design(cfg: DgpConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    return np.hstack([c.draw(rng, n) for c in cfg.covariates])


def _standardize(cfg: DgpConfig, x: np.ndarray) -> np.ndarray:
    moments = cfg.column_moments
    mean = np.array([m for _, m, _ in moments])
    sd = np.array([s for _, _, s in moments])
    return (x - mean) / sd


def _coef_vector(cfg: DgpConfig, coefs: Mapping[str, float]) -> np.ndarray:
    return np.array([float(coefs.get(name, 0.0)) for name in cfg.column_names])


def _continuous_mask(cfg: DgpConfig) -> np.ndarray:
    return np.array(
        [
            c.kind is CovariateKind.CONTINUOUS
            for c in cfg.covariates
            for _ in c.column_moments()
        ]
    )


def _selection_index(cfg: DgpConfig, s: np.ndarray, u: np.ndarray) -> np.ndarray:
    return s @ _coef_vector(cfg, cfg.selection_coefs) + cfg.u_strength * u


def _solve_intercept(index: np.ndarray, share: float) -> float:
    """Intercept giving mean selection probability ``share``."""
    return float(
        brentq(lambda a: float(expit(a + index).mean()) - share, -50.0, 50.0, xtol=1e-12)
    )


def _population(cfg: DgpConfig, n: int, seed: int | Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    s = _standardize(cfg, _draw_design(cfg, rng, n))
    return s, rng.normal(size=n)


def _potential_outcomes(
    cfg: DgpConfig, spec: OutcomeSpec, s: np.ndarray, u: np.ndarray, noise: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    base = spec.intercept + s @ _coef_vector(cfg, spec.baseline)
    if spec.nonlinear:
        weights = _coef_vector(cfg, spec.baseline) * _continuous_mask(cfg)
        base = base + 0.5 * ((s**2 - 1.0) @ np.abs(weights))
    y0 = base + cfg.u_strength * spec.noise_sd * u + spec.noise_sd * noise
    y1 = y0 + spec.treatment_effect + s @ _coef_vector(cfg, spec.interactions)
    return y1, y0


def _truth(cfg: DgpConfig, intercept: float) -> dict[str, dict[str, float]]:
    truth = {}
    for spec in cfg.outcomes:
        if not any(spec.interactions.values()):
            truth[spec.name] = {"ate": spec.treatment_effect, "att": spec.treatment_effect}
            continue
        gamma = _coef_vector(cfg, spec.interactions)
        weighted = total = 0.0
        remaining = cfg.truth_draws
        chunk = 0
        while remaining > 0:
            size = min(TRUTH_CHUNK, remaining)
            s, u = _population(cfg, size, [cfg.seed, 1, chunk])
            p = expit(intercept + _selection_index(cfg, s, u))
            weighted += float(p @ (s @ gamma))
            total += float(p.sum())
            remaining -= size
            chunk += 1
        truth[spec.name] = {
            "ate": spec.treatment_effect,
            "att": spec.treatment_effect + weighted / total,
        }
    return truth


def _build_arm(
    cfg: DgpConfig,
    arm: Arm,
    rng: np.random.Generator,
    n: int,
    first_id: int,
    intercept: float,
) -> tuple[Dataset, dict[str, tuple[np.ndarray, np.ndarray]]]:
    x = _draw_design(cfg, rng, n)
    s = _standardize(cfg, x)
    u = rng.normal(size=n)
    if arm is Arm.RCT:
        z = rng.integers(0, 2, size=n)
    else:
        z = (rng.random(size=n) < expit(intercept + _selection_index(cfg, s, u))).astype(int)
    outcomes = {}
    potential = {}
    for spec in cfg.outcomes:
        y1, y0 = _potential_outcomes(cfg, spec, s, u, rng.normal(size=n))
        potential[spec.name] = (y1, y0)
        outcomes[spec.name] = np.where(z == 1, y1, y0)
    d = Dataset(
        schema=cfg.schema,
        ids=np.arange(first_id, first_id + n),
        arms=np.full(n, arm.value, dtype=object),
        z=z,
        x=x,
        y=outcomes,
    )
    return d, potential


def generate(cfg: DgpConfig) -> SyntheticStudy:
    """Draw an RCT arm and an NRS arm from ``cfg`` with their true effects.

    RCT ids run 0..n_rct-1 and NRS ids continue from n_rct. Every emitted
    outcome equals z*y1 + (1-z)*y0 for the unit's potential outcomes.
    """
    s_pop, u_pop = _population(cfg, CALIBRATION_N, [cfg.seed, 0])
    intercept = _solve_intercept(_selection_index(cfg, s_pop, u_pop), cfg.treated_share)
    rct_seq, nrs_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rct, rct_pot = _build_arm(cfg, Arm.RCT, np.random.default_rng(rct_seq), cfg.n_rct, 0, intercept)
    nrs, nrs_pot = _build_arm(
        cfg, Arm.NRS, np.random.default_rng(nrs_seq), cfg.n_nrs, cfg.n_rct, intercept
    )
    logger.info(
        "generated RCT %d (%d treated), NRS %d (%d treated)",
        rct.n,
        rct.n_treated,
        nrs.n,
        nrs.n_treated,
    )
    return SyntheticStudy(
        rct=rct,
        nrs=nrs,
        truth=_truth(cfg, intercept),
        potential={Arm.RCT.value: rct_pot, Arm.NRS.value: nrs_pot},
    )


def expected_std_diffs(
    cfg: DgpConfig,
    s: np.ndarray,
    u: np.ndarray,
    policy: DenominatorPolicy = DenominatorPolicy.CONTROL_SD,
) -> np.ndarray:
    """Std. diff. per design column under expected selection weights on a fixed sample."""
    index = _selection_index(cfg, s, u)
    p = expit(_solve_intercept(index, cfg.treated_share) + index)
    q = 1.0 - p
    mean_t = p @ s / p.sum()
    mean_c = q @ s / q.sum()
    var_c = q @ (s - mean_c) ** 2 / q.sum()
    if policy is DenominatorPolicy.CONTROL_SD:
        denominator = np.sqrt(var_c)
    else:
        var_t = p @ (s - mean_t) ** 2 / p.sum()
        denominator = np.sqrt((var_t + var_c) / 2.0)
    return (mean_t - mean_c) / denominator


def _bisect_coordinate(
    f: Any, target: float, name: str, tol: float
) -> float:
    lo, hi = -BRACKET, BRACKET
    f_lo, f_hi = f(lo) - target, f(hi) - target
    if f_lo * f_hi > 0:
        raise Unachievable(
            name, f"Target std. diff. {target} for '{name}' lies outside the reachable range"
        )
    mid = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid) - target
        if abs(f_mid) < tol / 20 or hi - lo < 1e-8:
            break
        if (f_mid < 0) == (f_lo < 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return mid


def calibrate_to_targets(
    targets: Mapping[str, float],
    base: DgpConfig,
    tol: float = 0.02,
    max_iter: int = 25,
    n: int = CALIBRATION_N,
    seed: int = CALIBRATION_SEED,
    policy: DenominatorPolicy = DenominatorPolicy.CONTROL_SD,
    use_cache: bool = True,
) -> dict[str, float]:
    """Selection coefficients whose NRS std. diffs hit ``targets`` within ``tol``.

    Coordinate-wise bisection over [-8, 8] sweeps the target columns until
    every std. diff., measured on a fixed sample of ``n`` draws under
    expected selection weights, is within ``tol``. Results are cached on disk
    by a hash of the inputs.

    Raises:
        MissingColumn: A target names an unknown design column
        Unachievable: A target lies outside the bracket or sweeps run out
    """
    names = base.column_names
    unknown = sorted(set(targets) - set(names))
    if unknown:
        raise MissingColumn(f"Targets name unknown columns: {', '.join(unknown)}")

    key = settings_hash(
        {
            "targets": dict(targets),
            "base": base.to_dict() | {"seed": None, "n_rct": None, "n_nrs": None},
            "tol": tol,
            "n": n,
            "seed": seed,
            "policy": DenominatorPolicy(policy).value,
        }
    )
    path = cache_dir() / "calibration" / f"{key}.json"
    if use_cache and path.is_file():
        logger.info("calibration cache hit %s", path.name)
        return {k: float(v) for k, v in json.loads(path.read_text(encoding="utf-8")).items()}

    s, u = _population(base, n, seed)
    coefs = dict(base.selection_coefs)
    index = {name: j for j, name in enumerate(names)}

    def diffs(current: Mapping[str, float]) -> np.ndarray:
        return expected_std_diffs(replace(base, selection_coefs=current), s, u, policy)

    worst = ""
    for sweep in range(max_iter):
        for name, target in targets.items():
            def f(beta: float, name: str = name) -> float:
                return float(diffs({**coefs, name: beta})[index[name]])

            coefs[name] = _bisect_coordinate(f, target, name, tol)
        current = diffs(coefs)
        errors = {name: abs(current[index[name]] - t) for name, t in targets.items()}
        worst = max(errors, key=errors.__getitem__) if errors else ""
        logger.debug("calibration sweep %d: worst %s off by %.4f", sweep + 1, worst, errors.get(worst, 0.0))
        if not errors or errors[worst] <= tol:
            break
    else:
        raise Unachievable(worst, f"Calibration did not reach '{worst}' within {max_iter} sweeps")

    if use_cache:
        atomic_write_json(path, coefs)
    return {k: float(v) for k, v in coefs.items()}


# Treated/control means and std. diffs of the surgical-preference cohort.
REFLUX_COVARIATES: tuple[CovariateMoment, ...] = (
    CovariateMoment("age", mean=46.8, sd=12.0),
    CovariateMoment("female", p=0.40),
    CovariateMoment("duration", mean=27.6, sd=20.0),
    CovariateMoment("bmi", mean=52.1, sd=63.0),
    CovariateMoment("employment", levels=("1", "2", "3"), probs=(0.59, 0.135, 0.275)),
    CovariateMoment("education", levels=("1", "2", "3"), probs=(0.54, 0.26, 0.20)),
    CovariateMoment("heartburn", mean=59.6, sd=23.0),
    CovariateMoment("gastro", mean=53.3, sd=22.0),
    CovariateMoment("nausea", mean=82.8, sd=16.6),
    CovariateMoment("reflux_activity", mean=79.8, sd=14.4),
    CovariateMoment("gastro1", mean=78.6, sd=20.1),
    CovariateMoment("health_quality", mean=0.71, sd=0.226),
    CovariateMoment(
        "center",
        levels=tuple(f"c{i:02d}" for i in range(1, 22)),
        probs=(1.0 / 21,) * 20 + (1.0 - 20.0 / 21,),
        role=CovariateRole.CENTER_INDICATOR,
    ),
)

REFLUX_NRS_TARGETS: dict[str, float] = {
    "age": -0.32,
    "female": -0.11,
    "duration": 0.03,
    "bmi": 0.28,
    "employment_2": 0.15,
    "employment_3": -0.37,
    "education_2": 0.09,
    "education_3": -0.22,
    "heartburn": -1.08,
    "gastro": -0.59,
    "nausea": -0.77,
    "reflux_activity": -0.88,
    "gastro1": -0.45,
    "health_quality": -0.31,
}

REFLUX_TREATED_SHARE = 261 / 453


def reflux_outcomes(nonlinear: bool = False, heterogeneous: bool = False) -> tuple[OutcomeSpec, ...]:
    """Symptom-scale and quality-of-life outcomes with plausible noise levels."""
    return (
        OutcomeSpec(
            "health_status",
            intercept=70.0,
            baseline={
                "heartburn": 6.0,
                "reflux_activity": 5.0,
                "nausea": 3.0,
                "gastro": 3.0,
                "age": -2.0,
                "health_quality": 4.0,
                "bmi": -1.0,
                "female": -1.0,
            },
            treatment_effect=8.0,
            interactions={"heartburn": -2.0} if heterogeneous else {},
            nonlinear=nonlinear,
            noise_sd=15.0,
        ),
        OutcomeSpec(
            "quality_of_life",
            intercept=0.75,
            baseline={
                "health_quality": 0.08,
                "heartburn": 0.04,
                "reflux_activity": 0.03,
                "age": -0.01,
            },
            treatment_effect=0.05,
            interactions={"health_quality": -0.02} if heterogeneous else {},
            nonlinear=nonlinear,
            noise_sd=0.2,
        ),
    )


def reflux_like(
    seed: int = 0,
    n_rct: int = 357,
    n_nrs: int = 453,
    u_strength: float = 0.0,
    nonlinear: bool = False,
    heterogeneous: bool = False,
    calibration_n: int = CALIBRATION_N,
    targets: Mapping[str, float] | None = None,
) -> DgpConfig:
    """Preset shaped like the reflux surgery study, calibrated to its NRS balance."""
    base = DgpConfig(
        covariates=REFLUX_COVARIATES,
        outcomes=reflux_outcomes(nonlinear, heterogeneous),
        treated_share=REFLUX_TREATED_SHARE,
        n_rct=n_rct,
        n_nrs=n_nrs,
        u_strength=u_strength,
        seed=seed,
    )
    coefs = calibrate_to_targets(
        REFLUX_NRS_TARGETS if targets is None else targets, base, n=calibration_n
    )
    return replace(base, selection_coefs=coefs)


PRESETS = {"reflux_like": reflux_like}


def truth_json(study: SyntheticStudy) -> dict[str, Any]:
    return {name: dict(values) for name, values in study.truth.items()}
