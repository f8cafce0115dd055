"""Tests for inverse-probability weighting estimators."""

import numpy as np
import pytest

from causalbench.data_model import Dataset
from causalbench.effect import Estimand
from causalbench.errors import DegenerateArm, ExtremePropensity, NumericalWarning
from causalbench.outcome_models import fit_arm_models, regression_adjustment, treatment_coefficient
from causalbench.weighting import (
    aipw_estimate,
    ipw_estimate,
    ipw_regression_estimate,
    make_weights,
)


class TestMakeWeights:
    """Tests for ``make_weights``."""

    def test_ate_half(self) -> None:
        """Test e = 0.5 gives raw ATE weights of 2."""
        w = make_weights(np.array([1, 0, 1, 0]), np.full(4, 0.5))
        np.testing.assert_allclose(w.raw, 2.0)
        np.testing.assert_allclose(w.weights, 0.5)

    def test_att_control_odds(self) -> None:
        """Test an ATT control with e = 0.8 gets raw weight 4."""
        w = make_weights(np.array([1, 0]), np.array([0.5, 0.8]), Estimand.ATT)
        assert w.raw[0] == 1.0
        assert w.raw[1] == pytest.approx(4.0)

    def test_truncation_warns_and_flags(self) -> None:
        """Test out-of-bounds scores are clamped with a warning."""
        with pytest.warns(NumericalWarning):
            w = make_weights(np.array([1, 0]), np.array([0.5, 0.999]))
        assert w.e[1] == 0.99
        assert "truncated_pscores" in w.flags

    def test_no_truncation_raises(self) -> None:
        """Test extreme scores are refused when truncation is off."""
        with pytest.raises(ExtremePropensity):
            make_weights(np.array([1, 0]), np.array([0.5, 0.999]), truncate=False)

    def test_scores_must_be_inside_unit_interval(self) -> None:
        """Test a score of exactly 1 is refused."""
        with pytest.raises(ExtremePropensity):
            make_weights(np.array([1, 0]), np.array([0.5, 1.0]))


class TestIpwEstimate:
    """Tests for ``ipw_estimate``."""

    def test_att_hand_computation(self) -> None:
        """Test weighted control mean (1*1 + 4*2)/5 = 1.8 gives tau 1.2."""
        d = Dataset.from_arrays(np.zeros((3, 1)), np.array([1, 0, 0]), np.array([3.0, 1.0, 2.0]))
        w = make_weights(d.z, np.array([0.5, 0.5, 0.8]), Estimand.ATT)
        est = ipw_estimate(d, w)
        assert est.tau == pytest.approx(1.2)
        assert est.estimand is Estimand.ATT

    def test_constant_score_is_mean_difference(self, toy_nrs: Dataset) -> None:
        """Test constant e reduces to the raw difference in means."""
        y = toy_nrs.outcome("health")
        w = make_weights(toy_nrs.z, np.full(toy_nrs.n, 0.4))
        est = ipw_estimate(toy_nrs, w, "health")
        diff = y[toy_nrs.treated].mean() - y[~toy_nrs.treated].mean()
        assert est.tau == pytest.approx(diff)

    def test_zero_weight_arm(self) -> None:
        """Test an arm without weight is degenerate."""
        d = Dataset.from_arrays(np.zeros((2, 1)), np.array([1, 1]), np.array([1.0, 2.0]))
        w = make_weights(np.array([1, 1]), np.full(2, 0.5))
        with pytest.raises(DegenerateArm):
            ipw_estimate(d, w)

    def test_true_scores_cover_effect(self) -> None:
        """Test IPW with the true propensity covers the true ATE."""
        rng = np.random.default_rng(21)
        n = 5000
        x = rng.normal(size=n)
        e = 1 / (1 + np.exp(-0.7 * x))
        z = rng.binomial(1, e)
        y = x + 0.5 * z + rng.normal(size=n)
        d = Dataset.from_arrays(x[:, None], z, y)
        est = ipw_estimate(d, make_weights(z, e))
        assert abs(est.tau - 0.5) < 3 * est.se


class TestAugmented:
    """Tests for AIPW and IPW plus regression."""

    def test_zero_residual_models_equal_g_computation(self) -> None:
        """Test AIPW equals g-computation when the outcome models fit exactly."""
        rng = np.random.default_rng(2)
        x = rng.normal(size=(60, 1))
        z = np.tile([0, 1], 30)
        d = Dataset.from_arrays(x, z, 1 + x[:, 0] + 2 * z)
        mu1, mu0 = fit_arm_models(d)
        est = aipw_estimate(d, np.full(60, 0.5), mu1, mu0)
        assert est.tau == pytest.approx(regression_adjustment(d, bootstrap_reps=0).tau)

    def test_zero_models_equal_horvitz_thompson(self, toy_nrs: Dataset) -> None:
        """Test mu = 0 collapses AIPW to unnormalized IPW."""
        rng = np.random.default_rng(8)
        e = rng.uniform(0.2, 0.8, toy_nrs.n)
        zeros = np.zeros(toy_nrs.n)
        aipw = aipw_estimate(toy_nrs, e, zeros, zeros, "health")
        ipw = ipw_estimate(toy_nrs, make_weights(toy_nrs.z, e, normalized=False), "health")
        assert aipw.tau == pytest.approx(ipw.tau)

    def test_double_robustness(self) -> None:
        """Test a wrong outcome model with true scores and vice versa stay unbiased."""
        rng = np.random.default_rng(30)
        n = 4000
        x = rng.normal(size=n)
        e = 1 / (1 + np.exp(-0.8 * x))
        z = rng.binomial(1, e)
        y = 2 * x + 0.5 * z + rng.normal(size=n)
        d = Dataset.from_arrays(x[:, None], z, y)
        zeros = np.zeros(n)
        wrong_mu = aipw_estimate(d, e, zeros, zeros)
        assert abs(wrong_mu.tau - 0.5) < 3 * wrong_mu.se
        mu1, mu0 = fit_arm_models(d)
        wrong_e = aipw_estimate(d, np.full(n, 0.5), mu1, mu0)
        assert abs(wrong_e.tau - 0.5) < 3 * wrong_e.se

    def test_ipwra_uniform_weights(self, toy_nrs: Dataset) -> None:
        """Test unit weights reproduce the unweighted regression coefficient."""
        w = make_weights(toy_nrs.z, np.full(toy_nrs.n, 0.5))
        weighted = ipw_regression_estimate(toy_nrs, w, "health")
        plain = treatment_coefficient(toy_nrs, "health")
        assert weighted.tau == pytest.approx(plain.tau)

    def test_ipwra_exact_linear_truth(self) -> None:
        """Test y = 2z + x gives coefficient 2 whatever the weights."""
        rng = np.random.default_rng(6)
        x = rng.normal(size=(40, 1))
        z = np.tile([0, 1], 20)
        d = Dataset.from_arrays(x, z, 2 * z + x[:, 0])
        w = make_weights(z, rng.uniform(0.1, 0.9, 40))
        assert ipw_regression_estimate(d, w).tau == pytest.approx(2.0)
