"""Tests for distances, greedy/optimal matching and cardinality matching."""

from itertools import combinations, permutations

import numpy as np
import pytest
from pytest_mock import MockerFixture

from causalbench import methods
from causalbench.balance import DenominatorPolicy
from causalbench.data_model import Dataset
from causalbench.errors import Infeasible, MissingColumn, RankDeficient, SingularCovariance, TooFewPairs
from causalbench.matching import (
    BalanceConstraint,
    Caliper,
    CardinalitySolver,
    DistanceMatrix,
    DistanceMetric,
    DistanceSpec,
    MatchOrder,
    MatchResult,
    audit_match,
    bias_corrected_estimate,
    cardinality_match,
    distance_matrix,
    greedy_nn_match,
    mahalanobis_distances,
    match_outcomes,
    matched_pair_estimate,
    optimal_pair_match,
)
from causalbench.methods import run_method
from causalbench.propensity import logit


def pscore_matrix() -> DistanceMatrix:
    """Treated scores {0.8, 0.2} against controls {0.25, 0.3, 0.9}."""
    treated = np.array([0.8, 0.2])
    controls = np.array([0.25, 0.3, 0.9])
    return DistanceMatrix.from_array(np.abs(treated[:, None] - controls[None, :]), treated)


def one_covariate(x_t: list[float], x_c: list[float]) -> Dataset:
    x = np.array(x_t + x_c)[:, None]
    z = np.array([1] * len(x_t) + [0] * len(x_c))
    return Dataset.from_arrays(x, z, np.zeros(len(x)))


class TestDistances:
    """Tests for distance matrices."""

    def test_mahalanobis_identity_is_euclidean(self) -> None:
        """Test identity covariance reduces to Euclidean distance."""
        dist, repaired = mahalanobis_distances(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]), np.eye(2))
        assert dist[0, 0] == pytest.approx(5.0)
        assert not repaired

    def test_singular_covariance_is_repaired(self) -> None:
        """Test a rank-one covariance gets a ridge repair."""
        _, repaired = mahalanobis_distances(np.zeros((1, 2)), np.ones((1, 2)), np.ones((2, 2)))
        assert repaired

    def test_zero_covariance(self) -> None:
        """Test a covariance without variance cannot be repaired."""
        with pytest.raises(SingularCovariance):
            mahalanobis_distances(np.zeros((1, 2)), np.ones((1, 2)), np.zeros((2, 2)))

    def test_equal_scores_zero_distance(self) -> None:
        """Test equal propensity scores are at distance 0."""
        d = one_covariate([0.0], [1.0])
        dm = distance_matrix(d, DistanceSpec(), np.array([0.4, 0.4]))
        assert dm.values[0, 0] == 0.0

    def test_caliper_blocks_far_pairs(self) -> None:
        """Test logit differences beyond 0.2 sd become +inf."""
        d = one_covariate([0.0, 1.0], [2.0, 3.0])
        e = np.array([0.5, 0.9, 0.5, 0.1])
        dm = distance_matrix(d, DistanceSpec(caliper=Caliper(0.2)), e)
        assert dm.values[0, 0] == 0.0
        assert np.isinf(dm.values[0, 1])
        assert np.isinf(dm.values[1, 0])

    def test_controls_sorted_by_id(self) -> None:
        """Test control columns follow ascending unit id."""
        d = Dataset.from_arrays(
            np.arange(3.0)[:, None], np.array([1, 0, 0]), np.zeros(3), ids=np.array([5, 9, 2])
        )
        dm = distance_matrix(d, DistanceSpec(), np.array([0.5, 0.4, 0.6]))
        assert list(dm.control_ids) == [2, 9]

    def test_scores_required(self, toy_nrs: Dataset) -> None:
        """Test propensity metrics refuse to run without scores."""
        with pytest.raises(ValueError):
            distance_matrix(toy_nrs, DistanceSpec(DistanceMetric.PSCORE_LINEAR))


class TestGreedyAndOptimal:
    """Tests for greedy and optimal pair matching."""

    def test_greedy_data_order(self) -> None:
        """Test greedy matching pairs 0.8 with 0.9 then 0.2 with 0.25."""
        result = greedy_nn_match(pscore_matrix())
        assert result.pairs == ((0, 4), (1, 2))
        assert result.objective == pytest.approx(0.15)

    def test_greedy_largest_first(self) -> None:
        """Test the largest treated score is matched first."""
        dm = DistanceMatrix.from_array([[0.1], [0.05]], np.array([0.2, 0.8]))
        result = greedy_nn_match(dm, MatchOrder.LARGEST_PSCORE_FIRST)
        assert result.pairs == ((1, 2),)
        assert result.unmatched_treated == (0,)

    def test_greedy_ties_go_to_lowest_id(self) -> None:
        """Test equal distances choose the lowest control id."""
        result = greedy_nn_match(DistanceMatrix.from_array([[0.3, 0.3]]))
        assert result.pairs == ((0, 1),)

    def test_all_infinite(self) -> None:
        """Test no finite distance leaves every treated unit unmatched."""
        dm = DistanceMatrix.from_array(np.full((2, 2), np.inf))
        for result in (greedy_nn_match(dm), optimal_pair_match(dm)):
            assert result.n_pairs == 0
            assert result.unmatched_treated == (0, 1)

    def test_optimal_brute_force(self) -> None:
        """Test optimal matching attains the best of all 6 assignments."""
        treated = np.array([0.2, 0.8])
        controls = np.array([0.25, 0.3, 0.9])
        values = np.abs(treated[:, None] - controls[None, :])
        best = min(values[0, a] + values[1, b] for a, b in permutations(range(3), 2))
        result = optimal_pair_match(DistanceMatrix.from_array(values))
        assert result.objective == pytest.approx(best)
        assert result.objective == pytest.approx(0.15)

    def test_optimal_identity(self) -> None:
        """Test a zero diagonal pairs each treated unit with its column."""
        values = np.ones((3, 3)) - np.eye(3)
        result = optimal_pair_match(DistanceMatrix.from_array(values))
        assert result.pairs == ((0, 3), (1, 4), (2, 5))
        assert result.objective == 0.0

    def test_optimal_prefers_more_pairs(self) -> None:
        """Test infinite entries never displace a feasible pair."""
        values = np.array([[1.0, np.inf], [0.5, 10.0]])
        result = optimal_pair_match(DistanceMatrix.from_array(values))
        assert result.n_pairs == 2
        assert result.objective == pytest.approx(11.0)

    def test_optimal_never_worse_than_greedy(self, toy_nrs: Dataset) -> None:
        """Test the optimal objective is at most the greedy one."""
        e = np.clip(0.5 + 0.1 * toy_nrs.column("age"), 0.05, 0.95)
        dm = distance_matrix(toy_nrs, DistanceSpec(), e)
        assert optimal_pair_match(dm).objective <= greedy_nn_match(dm).objective + 1e-12


def exhaustive_cardinality(x_t: np.ndarray, x_c: np.ndarray, delta: float) -> int:
    """Largest m with size-m subsets whose mean gap is within delta pooled sd."""
    sd = np.sqrt((x_t.var(ddof=1) + x_c.var(ddof=1)) / 2)
    for m in range(min(x_t.size, x_c.size), 0, -1):
        for s_t in combinations(x_t, m):
            for s_c in combinations(x_c, m):
                if abs(np.mean(s_t) - np.mean(s_c)) <= delta * sd + 1e-12:
                    return m
    return 0


class TestCardinalityMatch:
    """Tests for ``cardinality_match``."""

    def test_loose_constraints_match_everyone(self) -> None:
        """Test a threshold of 10 keeps min(n_t, n_c) pairs."""
        d = one_covariate([0.0, 1.0, 2.0], [0.5, 1.5, 2.5, 3.5, 9.0])
        result = cardinality_match(d, [BalanceConstraint("x0", 10.0)])
        assert result.n_pairs == 3

    def test_matches_exhaustive_search(self) -> None:
        """Test the pair count equals an exhaustive subset search."""
        x_t = [0.0, 1.0, 2.0, 3.0]
        x_c = [1.5, 2.5, 3.5, 10.0]
        d = one_covariate(x_t, x_c)
        result = cardinality_match(d, [BalanceConstraint("x0", 0.1)])
        expected = exhaustive_cardinality(np.array(x_t), np.array(x_c), 0.1)
        assert 0 < expected < 4
        assert result.n_pairs == expected
        assert len(result.unmatched_treated) == len(x_t) - expected
        audit = audit_match(result, d, [BalanceConstraint("x0", 0.1)])
        assert audit.constraints_ok

    def test_disjoint_supports_infeasible(self) -> None:
        """Test disjoint covariate supports cannot be balanced."""
        d = one_covariate([0.0, 0.1, 0.2], [10.0, 10.1, 10.2])
        with pytest.raises(Infeasible):
            cardinality_match(d, [BalanceConstraint("x0", 0.01)], CardinalitySolver(time_limit=10))

    def test_unknown_covariate(self, toy_nrs: Dataset) -> None:
        """Test constraints must name design columns."""
        with pytest.raises(MissingColumn, match="bmi"):
            cardinality_match(toy_nrs, [BalanceConstraint("bmi")])


class TestMatchedEstimates:
    """Tests for pair-difference and bias-corrected estimates."""

    def test_pair_means(self) -> None:
        """Test pairs (3,1) and (5,2) give 2.5."""
        est = matched_pair_estimate([3.0, 5.0], [1.0, 2.0])
        assert est.tau == pytest.approx(2.5)
        assert est.estimand.value == "ATT"

    def test_identical_pairs(self) -> None:
        """Test equal outcomes give 0 with se 0."""
        est = matched_pair_estimate([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert est.tau == 0.0
        assert est.se == 0.0

    def test_one_pair_is_too_few(self) -> None:
        """Test a single pair is refused."""
        with pytest.raises(TooFewPairs):
            matched_pair_estimate([1.0], [0.0])

    def test_monte_carlo_pairs(self) -> None:
        """Test 1000 pairs with unit effect 0.3 cover 0.3."""
        rng = np.random.default_rng(13)
        base = rng.normal(size=1000)
        est = matched_pair_estimate(base + 0.3 + rng.normal(size=1000), base + rng.normal(size=1000))
        assert abs(est.tau - 0.3) < 3 * est.se

    def test_balanced_sample_matches_pair_estimate(self) -> None:
        """Test exactly balanced pairs make the regression equal the pair mean."""
        rng = np.random.default_rng(14)
        x = rng.normal(size=6)
        d = Dataset.from_arrays(
            np.concatenate([x, x])[:, None],
            np.array([1] * 6 + [0] * 6),
            rng.normal(size=12),
        )
        match = MatchResult(tuple((i, i + 6) for i in range(6)), (0.0,) * 6, (), 0.0)
        y_t, y_c = match_outcomes(match, d)
        plain = matched_pair_estimate(y_t, y_c)
        corrected = bias_corrected_estimate(match, d)
        assert corrected.tau == pytest.approx(plain.tau, abs=1e-8)

    def test_bias_correction_recovers_linear_truth(self) -> None:
        """Test y = 2z + 3x on an imbalanced match gives 2."""
        x = np.array([1.0, 2.0, 3.0, 0.5, 1.0, 2.5])
        z = np.array([1, 1, 1, 0, 0, 0])
        d = Dataset.from_arrays(x[:, None], z, 2 * z + 3 * x)
        match = MatchResult(((0, 3), (1, 4), (2, 5)), (0.5, 1.0, 0.5), (), 2.0)
        assert bias_corrected_estimate(match, d).tau == pytest.approx(2.0)

    def test_collinear_treatment(self) -> None:
        """Test a covariate equal to z is rank deficient."""
        z = np.array([1, 1, 1, 0, 0, 0])
        x = np.column_stack([z.astype(float), np.array([0.1, 0.5, 0.2, 0.9, 0.3, 0.4])])
        d = Dataset.from_arrays(x, z, np.arange(6.0))
        match = MatchResult(((0, 3), (1, 4), (2, 5)), (0.0, 0.0, 0.0), (), 0.0)
        with pytest.raises(RankDeficient):
            bias_corrected_estimate(match, d)

    def test_audit_accepts_pairs_inside_caliper(self) -> None:
        """Test pairs with equal logit scores pass the caliper check."""
        d = one_covariate([0.0, 1.0], [0.0, 1.0])
        e = np.array([0.3, 0.6, 0.3, 0.6])
        match = MatchResult(((0, 2), (1, 3)), (0.0, 0.0), (), 0.0)
        audit = audit_match(match, d, e=e, caliper=Caliper(0.2))
        assert audit.caliper_ok
        assert audit.max_abs_std_diff == pytest.approx(0.0)

    def test_audit_flags_pairs_outside_caliper(self) -> None:
        """Test crossed pairs with a logit gap of 1.25 sd fail a 0.2 sd caliper."""
        d = one_covariate([0.0, 1.0], [0.0, 1.0])
        e = np.array([0.3, 0.6, 0.3, 0.6])
        match = MatchResult(((0, 3), (1, 2)), (0.3, 0.3), (), 0.6)
        assert not audit_match(match, d, e=e, caliper=Caliper(0.2)).caliper_ok
        assert audit_match(match, d, e=e).caliper_ok

    def test_audit_needs_scores_for_caliper(self) -> None:
        """Test a caliper check without propensity scores is refused."""
        d = one_covariate([0.0, 1.0], [0.0, 1.0])
        match = MatchResult(((0, 2), (1, 3)), (0.0, 0.0), (), 0.0)
        with pytest.raises(ValueError):
            audit_match(match, d, caliper=Caliper(0.2))

    def test_audit_denominator_policy(self) -> None:
        """Test the audit divides a 0.5 mean gap by the chosen full-sample sd."""
        d = one_covariate([0.0, 2.0], [0.0, 1.0, 5.0])
        match = MatchResult(((0, 2), (1, 3)), (0.0, 1.0), (), 1.0)
        pooled = audit_match(match, d)
        control = audit_match(match, d, policy=DenominatorPolicy.CONTROL_SD)
        assert pooled.rows[0].std_diff == pytest.approx(0.5 / np.sqrt(4.5))
        assert control.rows[0].std_diff == pytest.approx(0.5 / np.sqrt(7.0))
        assert control.rows[0].policy is DenominatorPolicy.CONTROL_SD

    def test_audit_hides_centers_but_checks_them(self, toy_nrs: Dataset) -> None:
        """Test center rows are left out of the table but still constrained."""
        match = run_method("psmatch", toy_nrs, "health").match
        assert match is not None
        audit = audit_match(match, toy_nrs, [BalanceConstraint("center_c2", 0.0)])
        assert [r.covariate for r in audit.rows] == ["age", "female"]
        shown = audit_match(match, toy_nrs, include_centers=True)
        assert [r.covariate for r in shown.rows] == ["age", "female", "center_c2"]


def pair_logit_gaps(d: Dataset, match: MatchResult, e: np.ndarray) -> np.ndarray:
    lin = logit(e)
    treated = d.positions([t for t, _ in match.pairs])
    controls = d.positions([c for _, c in match.pairs])
    return np.abs(lin[treated] - lin[controls])


class TestMatchingMethods:
    """Tests for the registered matching estimators."""

    def test_psmatch_applies_default_caliper(self, toy_nrs: Dataset) -> None:
        """Test no pair is further apart than 0.2 sd of the logit score."""
        output = run_method("psmatch", toy_nrs, "health")
        assert output.match is not None and output.pscores is not None
        threshold = 0.2 * np.std(logit(output.pscores), ddof=1)
        gaps = pair_logit_gaps(toy_nrs, output.match, output.pscores)
        assert (gaps <= threshold + 1e-12).all()
        assert output.audit is not None and output.audit.caliper_ok

    def test_greedy_psmatch_applies_default_caliper(self, toy_nrs: Dataset) -> None:
        """Test the greedy variant honours the same caliper."""
        output = run_method("psmatch_greedy", toy_nrs, "health")
        assert output.match is not None and output.pscores is not None
        threshold = 0.2 * np.std(logit(output.pscores), ddof=1)
        assert (pair_logit_gaps(toy_nrs, output.match, output.pscores) <= threshold + 1e-12).all()

    def test_null_caliper_matches_everyone(self, toy_nrs: Dataset) -> None:
        """Test ``caliper=None`` pairs every treated unit while controls last."""
        output = run_method("psmatch", toy_nrs, "health", settings={"caliper": None})
        assert output.match is not None
        assert output.match.n_pairs == min(toy_nrs.n_treated, toy_nrs.n_control)
        assert output.match.unmatched_treated == ()

    def test_policy_setting_reaches_audit(self, toy_nrs: Dataset) -> None:
        """Test ``denominator_policy`` changes the audit's std. diffs."""
        pooled = run_method("psmatch", toy_nrs, "health")
        control = run_method(
            "psmatch", toy_nrs, "health", settings={"denominator_policy": "control_sd"}
        )
        assert pooled.audit is not None and control.audit is not None
        assert control.audit.rows[0].policy is DenominatorPolicy.CONTROL_SD
        age_t = toy_nrs.column("age")[toy_nrs.treated]
        age_c = toy_nrs.column("age")[~toy_nrs.treated]
        ratio = np.sqrt((age_t.var(ddof=1) + age_c.var(ddof=1)) / 2) / age_c.std(ddof=1)
        assert control.audit.rows[0].std_diff == pytest.approx(
            pooled.audit.rows[0].std_diff * ratio
        )

    def test_policy_setting_reaches_cardinality_solver(
        self, mocker: MockerFixture, toy_nrs: Dataset
    ) -> None:
        """Test cardmatch solves its constraints under the configured policy."""
        spy = mocker.spy(methods, "cardinality_match")
        run_method(
            "cardmatch",
            toy_nrs.subset(np.arange(120)),
            "health",
            settings={"denominator_policy": "control_sd", "max_std_diff": 0.2},
            point_only=True,
        )
        solver = spy.call_args.args[2]
        assert solver.policy is DenominatorPolicy.CONTROL_SD
