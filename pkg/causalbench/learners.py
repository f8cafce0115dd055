"""Machine-learning outcome models, the Super Learner ensemble and TMLE.

Trees come from scikit-learn's CART implementation; forests and boosting are
built on top of them here so that row sampling, seeding and the training-loss
path stay under this module's control.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol

import numpy as np
import statsmodels.api as sm
from joblib import Parallel, delayed
from scipy.optimize import minimize
from scipy.special import expit
from sklearn.linear_model import LassoCV, LinearRegression
from sklearn.linear_model import Lasso as SkLasso
from sklearn.model_selection import KFold, StratifiedKFold
from sklearn.preprocessing import StandardScaler
from sklearn.tree import DecisionTreeRegressor

from causalbench.data_model import Dataset
from causalbench.effect import EffectEstimate, Estimand
from causalbench.errors import NumericalWarning
from causalbench.propensity import DEFAULT_BOUNDS, estimate_propensity, logit

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 10
LASSO_GRID_SIZE = 20
OUTCOME_CLIP = 5e-4
MAX_EPSILON = 1e3


class LearnerKind(str, Enum):
    FOREST = "forest"
    LASSO = "lasso"
    BOOSTING = "boosting"

    @classmethod
    def parse(cls, value: str | LearnerKind) -> LearnerKind:
        if isinstance(value, LearnerKind):
            return value
        aliases = {"rf": "forest", "boost": "boosting", "gbm": "boosting"}
        return cls(aliases.get(value.lower(), value.lower()))


_DEFAULTS: dict[LearnerKind, dict[str, Any]] = {
    LearnerKind.FOREST: {
        "n_trees": 200,
        "mtry": None,
        "sample_fraction": 0.8,
        "min_leaf": 5,
        "max_depth": None,
        "replace": False,
    },
    LearnerKind.BOOSTING: {
        "n_rounds": 200,
        "learning_rate": 0.05,
        "max_depth": 2,
        "min_leaf": 1,
    },
    LearnerKind.LASSO: {"lam": None, "n_lambdas": LASSO_GRID_SIZE, "cv_folds": DEFAULT_FOLDS},
}


@dataclass(frozen=True)
class LearnerSpec:
    """One base learner: kind, hyperparameters (defaults filled in) and seed."""

    kind: LearnerKind
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        kind = LearnerKind.parse(self.kind)
        unknown = set(self.hyperparameters) - set(_DEFAULTS[kind])
        if unknown:
            raise ValueError(f"Unknown {kind.value} hyperparameters: {', '.join(sorted(unknown))}")
        params = {**_DEFAULTS[kind], **self.hyperparameters}
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "hyperparameters", params)
        self._validate()

    def _validate(self) -> None:
        h = self.hyperparameters
        checks: list[tuple[bool, str]]
        if self.kind is LearnerKind.FOREST:
            checks = [
                (h["n_trees"] >= 1, "n_trees must be >= 1"),
                (h["mtry"] is None or h["mtry"] >= 1, "mtry must be >= 1"),
                (0 < h["sample_fraction"] <= 1, "sample_fraction must be in (0, 1]"),
                (h["min_leaf"] >= 1, "min_leaf must be >= 1"),
            ]
        elif self.kind is LearnerKind.BOOSTING:
            checks = [
                (h["n_rounds"] >= 1, "n_rounds must be >= 1"),
                (0 < h["learning_rate"] <= 1, "learning_rate must be in (0, 1]"),
                (h["max_depth"] >= 1, "max_depth must be >= 1"),
            ]
        else:
            checks = [
                (h["lam"] is None or h["lam"] >= 0, "lambda must be >= 0"),
                (h["n_lambdas"] >= 2, "n_lambdas must be >= 2"),
                (h["cv_folds"] >= 2, "cv_folds must be >= 2"),
            ]
        for ok, message in checks:
            if not ok:
                raise ValueError(f"{self.kind.value}: {message}")

    @property
    def label(self) -> str:
        return self.kind.value


def default_learners(seed: int = 0) -> list[LearnerSpec]:
    """Forest, lasso and boosting with their default settings."""
    return [LearnerSpec(kind, seed=seed) for kind in LearnerKind]


class Predictor(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


def _matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def fit_tree(
    x: np.ndarray,
    y: np.ndarray,
    max_depth: int | None = None,
    min_leaf: int = 1,
    max_features: int | None = None,
    seed: int = 0,
) -> DecisionTreeRegressor:
    """Squared-error CART tree; leaves predict the mean of their units.

    A ``min_leaf`` above n/2 leaves the tree as a single leaf.
    """
    tree = DecisionTreeRegressor(
        max_depth=max_depth,
        min_samples_leaf=int(min_leaf),
        max_features=max_features,
        random_state=int(seed),
    )
    return tree.fit(_matrix(x), np.asarray(y, dtype=float).ravel())


def _tree_seeds(seed: int, count: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(count)


@dataclass(frozen=True, eq=False)
class RandomForest:
    trees: tuple[DecisionTreeRegressor, ...]

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = _matrix(x)
        total = np.zeros(x.shape[0])
        for tree in self.trees:
            total += tree.predict(x)
        return total / len(self.trees)


def _forest_tree(
    x: np.ndarray,
    y: np.ndarray,
    tree_seed: int,
    size: int,
    replace: bool,
    mtry: int,
    min_leaf: int,
    max_depth: int | None,
) -> DecisionTreeRegressor:
    rng = np.random.default_rng(tree_seed)
    rows = np.sort(rng.choice(x.shape[0], size=size, replace=replace))
    return fit_tree(x[rows], y[rows], max_depth, min_leaf, max_features=mtry, seed=tree_seed)


def fit_random_forest(
    x: np.ndarray,
    y: np.ndarray,
    n_trees: int = 200,
    mtry: int | None = None,
    sample_fraction: float = 0.8,
    seed: int = 0,
    min_leaf: int = 5,
    max_depth: int | None = None,
    replace: bool = False,
    n_jobs: int = 1,
) -> RandomForest:
    """Average of CART trees on seeded row subsamples with per-split feature sampling.

    Each tree sees ceil(sample_fraction * n) rows drawn without replacement
    (with replacement when ``replace``) and considers ``mtry`` features per
    split, ceil(p/3) by default. Per-tree seeds derive from ``seed`` so the
    result does not depend on ``n_jobs``.
    """
    x = _matrix(x)
    y = np.asarray(y, dtype=float).ravel()
    n, p = x.shape
    mtry = min(p, mtry or max(1, math.ceil(p / 3)))
    size = max(1, math.ceil(sample_fraction * n))
    seeds = _tree_seeds(seed, n_trees)
    trees = Parallel(n_jobs=n_jobs)(
        delayed(_forest_tree)(x, y, int(s), size, replace, mtry, min_leaf, max_depth)
        for s in seeds
    )
    return RandomForest(tuple(trees))


@dataclass(frozen=True, eq=False)
class BoostedTrees:
    base: float
    learning_rate: float
    trees: tuple[DecisionTreeRegressor, ...]
    train_loss: tuple[float, ...]

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = _matrix(x)
        prediction = np.full(x.shape[0], self.base)
        for tree in self.trees:
            prediction += self.learning_rate * tree.predict(x)
        return prediction


def fit_boosting(
    x: np.ndarray,
    y: np.ndarray,
    n_rounds: int = 200,
    learning_rate: float = 0.05,
    max_depth: int = 2,
    min_leaf: int = 1,
    seed: int = 0,
) -> BoostedTrees:
    """Stagewise squared-error gradient boosting with shrinkage.

    ``train_loss[m]`` is the training mean squared error after m rounds,
    starting from the constant fit.
    """
    x = _matrix(x)
    y = np.asarray(y, dtype=float).ravel()
    base = float(y.mean())
    fitted = np.full(y.shape[0], base)
    losses = [float(np.mean((y - fitted) ** 2))]
    trees = []
    for m, round_seed in enumerate(_tree_seeds(seed, n_rounds)):
        tree = fit_tree(x, y - fitted, max_depth, min_leaf, seed=int(round_seed))
        fitted = fitted + learning_rate * tree.predict(x)
        trees.append(tree)
        losses.append(float(np.mean((y - fitted) ** 2)))
        logger.debug("boosting round %d loss %.6g", m + 1, losses[-1])
    return BoostedTrees(base, learning_rate, tuple(trees), tuple(losses))


@dataclass(frozen=True, eq=False)
class LassoModel:
    """Lasso fit; ``coefficients`` are on the original column scale."""

    intercept: float
    coefficients: np.ndarray
    standardized_coefficients: np.ndarray
    lam: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.intercept + _matrix(x) @ self.coefficients


def lasso_lambda_grid(x_std: np.ndarray, y: np.ndarray, size: int = LASSO_GRID_SIZE) -> np.ndarray:
    """Geometric grid from max|X'(y - mean y)|/n down to a thousandth of it."""
    lam_max = float(np.max(np.abs(x_std.T @ (y - y.mean()))) / y.shape[0])
    if lam_max == 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * 1e-3, size)


def fit_lasso(
    x: np.ndarray,
    y: np.ndarray,
    lam: float | None = None,
    n_lambdas: int = LASSO_GRID_SIZE,
    cv_folds: int = DEFAULT_FOLDS,
    seed: int = 0,
) -> LassoModel:
    """Lasso by cyclic coordinate descent on internally standardized columns.

    The penalty is lam * sum|beta| on top of the squared error / (2n). Without
    ``lam`` the penalty is chosen by cross-validation over a geometric grid.
    """
    x = _matrix(x)
    y = np.asarray(y, dtype=float).ravel()
    scaler = StandardScaler().fit(x)
    scale = np.where(scaler.scale_ > 0, scaler.scale_, 1.0)
    x_std = (x - scaler.mean_) / scale

    if lam is None:
        grid = lasso_lambda_grid(x_std, y, n_lambdas)
        if grid[0] == 0:
            lam = 0.0
        else:
            folds = KFold(min(cv_folds, y.shape[0]), shuffle=True, random_state=seed)
            search = LassoCV(alphas=grid, cv=folds, tol=1e-7, max_iter=100_000).fit(x_std, y)
            lam = float(search.alpha_)
            logger.debug("lasso cv picked lambda %.4g", lam)

    if lam == 0:
        model: LinearRegression | SkLasso = LinearRegression().fit(x_std, y)
    else:
        model = SkLasso(alpha=lam, tol=1e-10, max_iter=100_000).fit(x_std, y)
    beta_std = np.asarray(model.coef_, dtype=float).ravel()
    beta = beta_std / scale
    intercept = float(model.intercept_ - beta @ scaler.mean_)
    return LassoModel(intercept, beta, beta_std, float(lam))


def fit_learner(spec: LearnerSpec, x: np.ndarray, y: np.ndarray, n_jobs: int = 1) -> Predictor:
    h = spec.hyperparameters
    if spec.kind is LearnerKind.FOREST:
        return fit_random_forest(
            x,
            y,
            n_trees=h["n_trees"],
            mtry=h["mtry"],
            sample_fraction=h["sample_fraction"],
            seed=spec.seed,
            min_leaf=h["min_leaf"],
            max_depth=h["max_depth"],
            replace=h["replace"],
            n_jobs=n_jobs,
        )
    if spec.kind is LearnerKind.BOOSTING:
        return fit_boosting(
            x,
            y,
            n_rounds=h["n_rounds"],
            learning_rate=h["learning_rate"],
            max_depth=h["max_depth"],
            min_leaf=h["min_leaf"],
            seed=spec.seed,
        )
    return fit_lasso(
        x, y, lam=h["lam"], n_lambdas=h["n_lambdas"], cv_folds=h["cv_folds"], seed=spec.seed
    )


def fold_assignment(
    n: int, k: int = DEFAULT_FOLDS, seed: int = 0, strata: np.ndarray | None = None
) -> np.ndarray:
    """Fold label per unit, shuffled by ``seed`` and stratified when ``strata`` is given."""
    if k < 2:
        raise ValueError(f"Need at least 2 folds, got {k}")
    labels = np.empty(n, dtype=np.int64)
    placeholder = np.zeros((n, 1))
    if strata is not None:
        splitter = StratifiedKFold(k, shuffle=True, random_state=seed)
        splits = splitter.split(placeholder, np.asarray(strata))
    else:
        splits = KFold(k, shuffle=True, random_state=seed).split(placeholder)
    for fold, (_, test) in enumerate(splits):
        labels[test] = fold
    return labels


def _fold_column(
    spec: LearnerSpec, x: np.ndarray, y: np.ndarray, labels: np.ndarray, fold: int
) -> tuple[np.ndarray, np.ndarray]:
    held_out = labels == fold
    seed = int(np.random.SeedSequence([spec.seed, fold]).generate_state(1)[0])
    fold_spec = LearnerSpec(spec.kind, spec.hyperparameters, seed)
    model = fit_learner(fold_spec, x[~held_out], y[~held_out])
    return held_out, model.predict(x[held_out])


def cv_predictions(
    learners: Sequence[LearnerSpec],
    x: np.ndarray,
    y: np.ndarray,
    k: int = DEFAULT_FOLDS,
    seed: int = 0,
    strata: np.ndarray | None = None,
    n_jobs: int = 1,
) -> np.ndarray:
    """Out-of-fold predictions, one column per learner."""
    x = _matrix(x)
    y = np.asarray(y, dtype=float).ravel()
    labels = fold_assignment(y.shape[0], k, seed, strata)
    jobs = [(j, fold) for j in range(len(learners)) for fold in range(k)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fold_column)(learners[j], x, y, labels, fold) for j, fold in jobs
    )
    predictions = np.empty((y.shape[0], len(learners)))
    for (j, _), (held_out, values) in zip(jobs, results, strict=True):
        predictions[held_out, j] = values
    return predictions


@dataclass(frozen=True, eq=False)
class SuperLearnerFit:
    weights: np.ndarray
    cv_risk: np.ndarray
    folds: int
    objective: float


def super_learner_weights(
    predictions: np.ndarray, y: np.ndarray, folds: int = DEFAULT_FOLDS
) -> SuperLearnerFit:
    """Simplex weights minimising the mean squared error of P @ w against y.

    A sequential quadratic programming solve on the simplex is compared with
    every single-learner vertex and the better point kept, so the objective
    never exceeds the best single-learner CV risk.
    """
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if not np.isfinite(p).all():
        raise ValueError("Out-of-fold predictions must be finite")
    n, k = p.shape
    cv_risk = np.mean((y[:, None] - p) ** 2, axis=0)
    scale = float(np.var(y)) or 1.0

    def risk(w: np.ndarray) -> float:
        return float(np.mean((y - p @ w) ** 2))

    def objective(w: np.ndarray) -> float:
        return risk(w) / scale

    def gradient(w: np.ndarray) -> np.ndarray:
        return -2.0 * p.T @ (y - p @ w) / (n * scale)

    solution = minimize(
        objective,
        np.full(k, 1.0 / k),
        jac=gradient,
        method="SLSQP",
        bounds=[(0.0, 1.0)] * k,
        constraints=({"type": "eq", "fun": lambda w: w.sum() - 1.0},),
        options={"ftol": 1e-15, "maxiter": 1000},
    )
    weights = np.clip(solution.x, 0.0, None)
    weights = weights / weights.sum() if weights.sum() > 0 else np.full(k, 1.0 / k)
    best = int(np.argmin(cv_risk))
    if cv_risk[best] <= risk(weights):
        weights = np.zeros(k)
        weights[best] = 1.0
    return SuperLearnerFit(weights, cv_risk, folds, risk(weights))


@dataclass(frozen=True, eq=False)
class SuperLearner:
    """Weighted combination of base learners refit on the complete data."""

    specs: tuple[LearnerSpec, ...]
    models: tuple[Predictor, ...]
    fit: SuperLearnerFit

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = _matrix(x)
        out = np.zeros(x.shape[0])
        for weight, model in zip(self.fit.weights, self.models, strict=True):
            if weight > 0:
                out += weight * model.predict(x)
        return out


def fit_super_learner(
    learners: Sequence[LearnerSpec],
    x: np.ndarray,
    y: np.ndarray,
    k: int = DEFAULT_FOLDS,
    seed: int = 0,
    strata: np.ndarray | None = None,
    n_jobs: int = 1,
) -> SuperLearner:
    x = _matrix(x)
    y = np.asarray(y, dtype=float).ravel()
    oof = cv_predictions(learners, x, y, k, seed, strata, n_jobs)
    weights = super_learner_weights(oof, y, k)
    logger.info(
        "super learner weights %s",
        ", ".join(f"{s.label}={w:.3f}" for s, w in zip(learners, weights.weights, strict=True)),
    )
    models = tuple(fit_learner(spec, x, y, n_jobs) for spec in learners)
    return SuperLearner(tuple(learners), models, weights)


@dataclass(frozen=True)
class TmleResult:
    """Targeted estimate on the original outcome scale.

    ``bounds`` are the (min, max) used to map the outcome onto [0, 1];
    ``eif_residual`` is |mean H(y - mu*)| on that scale after targeting.
    """

    psi: float
    epsilon: float
    se: float
    initial_psi: float
    estimand: Estimand
    bounds: tuple[float, float]
    eif_residual: float
    flags: tuple[str, ...] = ()

    def to_estimate(self, method_id: str, n_used: int, outcome: str = "") -> EffectEstimate:
        return EffectEstimate.normal(
            method_id, self.estimand, self.psi, self.se, n_used, outcome=outcome, flags=self.flags
        )


def _fluctuate(ys: np.ndarray, h: np.ndarray, q: np.ndarray) -> float | None:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = sm.GLM(ys, h[:, None], family=sm.families.Binomial(), offset=logit(q))
            epsilon = float(model.fit().params[0])
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as e:
        logger.info("TMLE fluctuation failed: %s", e)
        return None
    if not math.isfinite(epsilon) or abs(epsilon) > MAX_EPSILON:
        return None
    return epsilon


def tmle(
    d: Dataset,
    sl_outcome: Predictor,
    e: np.ndarray,
    estimand: Estimand = Estimand.ATE,
    outcome: str | None = None,
    include_centers: bool = True,
    bounds: tuple[float, float] = DEFAULT_BOUNDS,
) -> TmleResult:
    """Targeted maximum likelihood estimate of the ATE or ATT.

    ``sl_outcome`` predicts y from the design ``[z, X]``. Outcomes are mapped
    onto [0, 1], the initial predictions are fluctuated along the clever
    covariate by an intercept-free logistic regression with offset
    logit(mu), and the targeted contrast is mapped back to outcome units.
    A diverging fluctuation falls back to the initial estimate, flagged.
    """
    estimand = Estimand.parse(estimand)
    x, _ = d.design(include_centers=include_centers)
    y = d.outcome(outcome)
    z = d.z.astype(float)
    n = d.n
    lo_y, hi_y = float(y.min()), float(y.max())
    width = hi_y - lo_y if hi_y > lo_y else 1.0
    e = np.clip(np.asarray(e, dtype=float).ravel(), *bounds)

    def scaled(values: np.ndarray) -> np.ndarray:
        return np.clip((values - lo_y) / width, OUTCOME_CLIP, 1 - OUTCOME_CLIP)

    ys = (y - lo_y) / width
    q1 = scaled(np.asarray(sl_outcome.predict(np.column_stack([np.ones(n), x])), dtype=float))
    q0 = scaled(np.asarray(sl_outcome.predict(np.column_stack([np.zeros(n), x])), dtype=float))
    qz = np.where(z == 1, q1, q0)

    if estimand is Estimand.ATE:
        h1, h0 = 1.0 / e, -1.0 / (1.0 - e)
    else:
        share = z.mean()
        h1, h0 = np.full(n, 1.0 / share), -e / ((1.0 - e) * share)
    h = np.where(z == 1, h1, h0)

    def contrast(m1: np.ndarray, m0: np.ndarray) -> float:
        if estimand is Estimand.ATE:
            return float(np.mean(m1 - m0))
        return float(np.sum(z * (m1 - m0)) / z.sum())

    initial = contrast(q1, q0)
    flags: tuple[str, ...] = ()
    epsilon = _fluctuate(ys, h, qz)
    if epsilon is None:
        warnings.warn(
            "TMLE fluctuation did not converge; reporting the initial estimate",
            NumericalWarning,
            stacklevel=2,
        )
        flags = ("fluctuation_fallback",)
        epsilon = 0.0
    q1s = expit(logit(q1) + epsilon * h1)
    q0s = expit(logit(q0) + epsilon * h0)
    qzs = np.where(z == 1, q1s, q0s)
    psi = contrast(q1s, q0s)

    if estimand is Estimand.ATE:
        eif = h * (ys - qzs) + q1s - q0s - psi
    else:
        eif = h * (ys - qzs) + z * (q1s - q0s - psi) / z.mean()
    se = float(np.std(eif, ddof=1) / np.sqrt(n))
    residual = float(abs(np.mean(h * (ys - qzs))))
    logger.debug("TMLE epsilon %.4g, eif residual %.3g", epsilon, residual)
    return TmleResult(
        psi=psi * width,
        epsilon=epsilon,
        se=se * width,
        initial_psi=initial * width,
        estimand=estimand,
        bounds=(lo_y, hi_y),
        eif_residual=residual,
        flags=flags,
    )


def fit_outcome_super_learner(
    d: Dataset,
    learners: Sequence[LearnerSpec] | None = None,
    outcome: str | None = None,
    folds: int = DEFAULT_FOLDS,
    seed: int = 0,
    include_centers: bool = True,
    n_jobs: int = 1,
) -> SuperLearner:
    """Super Learner for y given (z, X) with folds stratified by z."""
    x, _ = d.design(include_centers=include_centers)
    return fit_super_learner(
        learners or default_learners(seed),
        np.column_stack([d.z, x]),
        d.outcome(outcome),
        k=folds,
        seed=seed,
        strata=d.z,
        n_jobs=n_jobs,
    )


def sl_tmle_estimate(
    d: Dataset,
    outcome: str | None = None,
    estimand: Estimand = Estimand.ATE,
    learners: Sequence[LearnerSpec] | None = None,
    folds: int = DEFAULT_FOLDS,
    seed: int = 0,
    include_centers: bool = True,
    e: np.ndarray | None = None,
    n_jobs: int = 1,
    method_id: str = "sl_tmle",
) -> EffectEstimate:
    """Super Learner outcome model targeted by TMLE, as an EffectEstimate."""
    if e is None:
        _, e = estimate_propensity(d, include_centers=include_centers)
    sl = fit_outcome_super_learner(d, learners, outcome, folds, seed, include_centers, n_jobs)
    result = tmle(d, sl, e, estimand, outcome, include_centers)
    return result.to_estimate(method_id, d.n, outcome or d.outcome_names[0])
